//! Finite-difference check of every differentiable component.

use invic::gradsuite::{run_suite, TOLERANCE};

fn main() -> invic::Result<()> {
    let entries = run_suite(0)?;
    for e in &entries {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<32} {:>10.3e} over {:>3} coords  {verdict}", e.component, e.max_rel_err, e.coords);
    }
    let failed = entries.iter().filter(|e| !e.passed()).count();
    println!("{failed} of {} above {TOLERANCE:e}", entries.len());
    Ok(())
}
