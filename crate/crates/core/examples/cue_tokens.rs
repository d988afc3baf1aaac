//! Extracts question-conditioned cue tokens from random question and
//! visual features, and shows how the cues respond to each input.

use invic::cte::{extract_cues, extract_cues_routed, CteConfig, CteParams, VisualRoute};
use invic::diffcore::{Graph, Init, ParamStore, Tensor};
use invic::layers::Tokens;

fn cues(store: &ParamStore<f64>, p: &CteParams, q: &Tensor<f64>, v: &Tensor<f64>, route: VisualRoute) -> invic::Result<Tensor<f64>> {
    let mut g = Graph::with_params(store);
    let (qv, vv) = (g.constant(q.clone()), g.constant(v.clone()));
    let (qt, vt) = (Tokens::full(&g, qv), Tokens::full(&g, vv));
    let b = extract_cues_routed(&mut g, qt, vt, p, route)?;
    Ok(g.value(b.cues).clone())
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> invic::Result<()> {
    let cfg = CteConfig {
        k: 4,
        d_slot: 16,
        d_llm: 32,
        d_visual: 32,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let mut init = Init::new(7);
    let p = CteParams::new(&mut store, &mut init, "cte", cfg)?;

    let q = init.normal(&[5, 32], 1.0);
    let v = init.normal(&[16, 32], 1.0);

    // Fresh extractor: offset MLP and calibration are zero, so the slots
    // start at the learned seeds whatever the question.
    let mut g = Graph::with_params(&store);
    let (qv, vv) = (g.constant(q.clone()), g.constant(v.clone()));
    let (qt, vt) = (Tokens::full(&g, qv), Tokens::full(&g, vv));
    let b = extract_cues(&mut g, qt, vt, &p)?;
    let seeds = store.get(p.seed_slots);
    println!("cues shape {:?}", g.value(b.cues).shape());
    println!("S0 equals the seed slots: {}", g.value(b.s0).bitwise_eq(seeds));
    drop(g);

    // Perturb every weight, standing in for a trained extractor.
    init.jitter(&mut store, 0.1);
    let base = cues(&store, &p, &q, &v, VisualRoute::Attend)?;
    let other_v = cues(&store, &p, &q, &init.normal(&[16, 32], 1.0), VisualRoute::Attend)?;
    let other_q = cues(&store, &p, &init.normal(&[5, 32], 1.0), &v, VisualRoute::Attend)?;
    let bypass = cues(&store, &p, &q, &v, VisualRoute::Bypass)?;
    println!("change visual tokens:   max |dC| = {:.4}", max_diff(&base, &other_v));
    println!("change question tokens: max |dC| = {:.4}", max_diff(&base, &other_q));
    println!("skip visual retrieval:  max |dC| = {:.4}", max_diff(&base, &bypass));
    Ok(())
}
