//! Generates the biased toy VQA splits and shows a few samples.
//!
//! `cargo run --example gen_data -- [p_bias]`

use invic::toyvqa::vocab::decode;
use invic::toyvqa::{effective_bias, gen_dataset, DataConfig, Split, Template};

fn main() -> invic::Result<()> {
    let p_bias = std::env::args().nth(1).map_or(Ok(0.9), |s| s.parse()).expect("p_bias is a number");
    let data = gen_dataset(&DataConfig {
        n_train: 2000,
        n_test: 200,
        p_bias,
        ..Default::default()
    })?;

    for t in Template::ALL {
        println!(
            "{:<16} majority {:<8} effective bias {:.3}",
            t.name(),
            decode(&[t.majority()]),
            effective_bias(t, p_bias)
        );
    }
    for split in Split::ALL {
        let samples = data.split(split);
        let consistent = samples.iter().filter(|s| s.bias_consistent).count();
        println!("{:<10} {:>5} samples, {:.3} bias-consistent", split.name(), samples.len(), consistent as f64 / samples.len() as f64);
    }
    for s in data.train.iter().take(3) {
        println!("grid {:?}", s.grid);
        println!("  q: {}  a: {}", decode(&s.q), decode(&s.a));
    }
    Ok(())
}
