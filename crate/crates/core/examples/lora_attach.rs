//! Attaching LoRA adapters leaves the decoder's outputs bitwise unchanged;
//! one update of the adapters then moves them.

use invic::decoder::{assemble, forward, teacher_forced, DecoderConfig, DecoderParams, SampleParts};
use invic::diffcore::{Graph, Init, ParamStore, Tensor};
use invic::masking::MaskKind;

fn logits(store: &ParamStore<f32>, p: &DecoderParams, v: &Tensor<f32>) -> invic::Result<Tensor<f32>> {
    let mut g = Graph::with_params(store);
    let visual = g.constant(v.clone());
    let answer = [9, 2];
    let a_in = teacher_forced(&answer);
    let parts = [SampleParts {
        visual,
        question: &[5, 6, 7],
        q_valid: 3,
        cues: None,
        answer_in: &a_in,
        answer_targets: &answer,
    }];
    let inp = assemble(&mut g, p, &parts)?;
    let l = forward(&mut g, &inp, MaskKind::Causal, p)?;
    Ok(g.value(l).clone())
}

fn main() -> invic::Result<()> {
    let cfg = DecoderConfig {
        vocab: 16,
        d_llm: 32,
        max_len: 16,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let mut init = Init::new(3);
    let mut p = DecoderParams::new(&mut store, &mut init, "dec", cfg)?;
    // Give the zero-initialized output projections some weight so the
    // blocks are not the identity.
    init.jitter(&mut store, 0.05);
    let v = init.normal(&[4, 32], 1.0);

    let before = logits(&store, &p, &v)?;
    p.attach_lora(&mut store, &mut init, "dec", 4)?;
    let after = logits(&store, &p, &v)?;
    println!("bitwise equal after attach: {}", before.bitwise_eq(&after));

    let b = store.id("dec.block0.attn.wq.lora_b").expect("adapter registered");
    store.get_mut(b).data_mut().iter_mut().for_each(|x| *x = 0.01);
    let moved = logits(&store, &p, &v)?;
    let diff = before.data().iter().zip(moved.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("after touching B: max |dlogit| = {diff:.5}");
    println!("adapter tensors: {}", store.iter().filter(|(_, p)| p.name.contains("lora")).count());
    Ok(())
}
