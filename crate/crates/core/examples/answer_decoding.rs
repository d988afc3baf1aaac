//! Assembles `[V; Q; C; A]` inputs, scores the answer positions and
//! decodes greedily, using an untrained toy model.

use invic::decoder::generate;
use invic::diffcore::Graph;
use invic::masking::{BottleneckMode, MaskKind};
use invic::toyvqa::model::{padded_question, visual_and_cues};
use invic::toyvqa::vocab::decode;
use invic::toyvqa::{batch_logits, gen_dataset, CueVariant, DataConfig, ToySample};
use invic::trainer::{Model, RunConfig};
use invic::cte::VisualRoute;

fn main() -> invic::Result<()> {
    let cfg = RunConfig::default();
    let data = gen_dataset(&DataConfig {
        n_train: 4,
        n_test: 4,
        ..Default::default()
    })?;
    let model = Model::with_cues(&cfg, CueVariant::Cte, 4)?;
    let batch: Vec<&ToySample> = data.train.iter().take(2).collect();
    let kind = MaskKind::Bottleneck(BottleneckMode::Prose);

    let mut g = Graph::with_params(&model.store);
    let (inp, logits) = batch_logits(&mut g, &model.arch, &batch, kind)?;
    let loss = invic::decoder::answer_loss(&mut g, logits, &inp)?;
    for (l, o) in inp.layouts.iter().zip(&inp.offsets) {
        println!("layout {l:?} at row {o}");
    }
    println!("answer rows {:?}", inp.omega());
    println!("loss {:.4} (uniform would be {:.4})", g.value(loss).data()[0], (cfg.model.decoder.vocab as f64).ln());

    let (visual, cues) = visual_and_cues(&mut g, &model.arch, &batch, VisualRoute::Attend)?;
    let inputs: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(b, s)| invic::decoder::GenInput {
            visual: g.value(visual[b]).clone(),
            question: padded_question(&s.q),
            q_valid: s.q.len(),
            cues: cues[b].map(|c| g.value(c).clone()),
        })
        .collect();
    drop(g);
    for (s, out) in batch.iter().zip(generate(&model.store, &model.arch.decoder, &inputs, kind, 3)?) {
        println!("{} -> {:?} (truncated: {})", decode(&s.q), decode(&out.tokens), out.truncated);
    }
    Ok(())
}
