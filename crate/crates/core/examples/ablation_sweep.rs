//! Cue-count sweep from one backbone, printed as a markdown table.

use invic::trainer::{k_sweep_grid, pretrain_backbone, run_ablation, RunConfig};
use invic::toyvqa::gen_dataset;

fn main() -> invic::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.n_train = 2000;
    cfg.data.n_test = 200;
    cfg.train.stage1.epochs = 1;
    cfg.train.stage2.epochs = 1;
    let data = gen_dataset(&cfg.data)?;
    let backbone = pretrain_backbone(&cfg, &data)?.checkpoint();
    let report = run_ablation(&cfg, &data, &backbone, &k_sweep_grid(), |r| {
        eprintln!("done {}", r.cell.name());
    });
    print!("{}", report.to_markdown());
    Ok(())
}
