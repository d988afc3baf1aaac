//! Backbone pretraining, Stage I and Stage II on a reduced problem, then
//! the shortcut checks against the two reference schedules.
//!
//! Takes a few minutes in release mode. The `invic train` subcommand runs
//! the same pipeline at full size.

use invic::trainer::{run_baselines, run_pipeline, shortcut_checks, RunConfig};
use invic::toyvqa::gen_dataset;

fn main() -> invic::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.n_train = 2000;
    cfg.data.n_test = 200;
    cfg.train.stage1.epochs = 1;
    cfg.train.stage2.epochs = 1;
    let data = gen_dataset(&cfg.data)?;

    let p = run_pipeline(&cfg, &data)?;
    println!("question-only test_anti {:.4}", p.question_only.accuracy);
    for o in [&p.phase0, &p.stage1, &p.stage2] {
        let r = &o.report;
        println!(
            "{:<7} {} epochs, eval {:?}: iid {:.4} anti {:.4}",
            r.phase,
            r.epochs.len(),
            r.eval_mask,
            r.metrics.test_iid.accuracy,
            r.metrics.test_anti.accuracy
        );
    }
    let b = run_baselines(&cfg, &data, &p)?;
    for c in shortcut_checks(&cfg, &p, &b) {
        println!("{c}");
    }
    Ok(())
}
