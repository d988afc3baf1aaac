//! Saves a model with cues and LoRA, reloads it, and compares bytes and
//! evaluation metrics.

use invic::masking::MaskKind;
use invic::toyvqa::{gen_dataset, CueVariant};
use invic::trainer::{Checkpoint, Model, RunConfig};

fn main() -> invic::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.n_train = 50;
    cfg.data.n_test = 50;
    let data = gen_dataset(&cfg.data)?;

    let mut model = Model::with_cues(&cfg, CueVariant::Cte, 8)?;
    model.attach_lora(&cfg)?;
    let path = std::env::temp_dir().join("invic_example.ckpt");
    let saved = model.checkpoint();
    saved.save(&path)?;

    let loaded = Checkpoint::load(&path)?;
    println!("{} tensors, {} bytes", loaded.names().count(), std::fs::metadata(&path)?.len());
    println!("byte-identical: {}", loaded.to_bytes() == saved.to_bytes());

    let again = Model::from_checkpoint(&cfg, &loaded)?;
    let maj = data.majority();
    let a = model.evaluate(&data.test_anti, &maj, MaskKind::Causal, 25)?;
    let b = again.evaluate(&data.test_anti, &maj, MaskKind::Causal, 25)?;
    println!("test_anti accuracy {:.4} / reloaded {:.4}, equal: {}", a.accuracy, b.accuracy, a == b);
    std::fs::remove_file(&path)?;
    Ok(())
}
