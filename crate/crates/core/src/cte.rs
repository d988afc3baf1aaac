//! Cue-token extraction: K question-conditioned slots read the question, then
//! the image, and are projected and calibrated into decoder hidden space.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{xblock, Ffn, LayerNorm, Linear, Tokens, WeightInit, XBlockParams, HEAD_COUNT};

/// Hidden width of the calibration MLP relative to `d_llm`.
pub const CALIB_EXPAND: usize = 4;

/// Std of the seed-slot initialization.
pub const SEED_STD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CteConfig {
    pub k: usize,
    pub d_slot: usize,
    pub d_llm: usize,
    pub d_visual: usize,
    pub heads: usize,
    /// Feed-forward sublayer inside each retriever block.
    pub xblock_ffn: bool,
    /// Initial value of the offset gate `gamma` and calibration gate `alpha`.
    pub gate_init: f64,
}

impl Default for CteConfig {
    fn default() -> Self {
        Self {
            k: 16,
            d_slot: 64,
            d_llm: 128,
            d_visual: 128,
            heads: HEAD_COUNT,
            xblock_ffn: true,
            gate_init: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CteParams {
    pub cfg: CteConfig,
    pub seed_slots: ParamId,
    pub offset: Linear,
    pub gamma: ParamId,
    pub text: XBlockParams,
    pub visual: [XBlockParams; 2],
    pub proj: Linear,
    pub post_norm: LayerNorm,
    pub calib: Ffn,
    pub alpha: ParamId,
}

impl CteParams {
    /// Registers every parameter under `{name}.`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: CteConfig,
    ) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::Config("cue count K must be at least 1".into()));
        }
        let n = |s: &str| format!("{name}.{s}");
        let seed_slots = store.add(n("seed_slots"), init.normal(&[cfg.k, cfg.d_slot], SEED_STD));
        let offset = Linear::new(store, init, &n("offset"), cfg.d_llm, cfg.d_slot, true, WeightInit::Zero);
        let gamma = store.add(n("gamma"), Tensor::full(&[1, 1], T::lit(cfg.gate_init)));
        let block = |store: &mut ParamStore<T>, init: &mut Init, tag: &str, ctx: usize| {
            XBlockParams::new(store, init, &n(tag), cfg.d_slot, ctx, cfg.heads, cfg.xblock_ffn)
        };
        let text = block(store, init, "text0", cfg.d_llm)?;
        let visual = [
            block(store, init, "visual0", cfg.d_visual)?,
            block(store, init, "visual1", cfg.d_visual)?,
        ];
        let proj = Linear::new(store, init, &n("proj"), cfg.d_slot, cfg.d_llm, false, WeightInit::Gaussian);
        let post_norm = LayerNorm::new(store, &n("post_norm"), cfg.d_llm);
        let calib = Ffn::new(store, init, &n("calib"), cfg.d_llm, CALIB_EXPAND, WeightInit::Zero);
        let alpha = store.add(n("alpha"), Tensor::full(&[1, 1], T::lit(cfg.gate_init)));
        Ok(Self {
            cfg,
            seed_slots,
            offset,
            gamma,
            text,
            visual,
            proj,
            post_norm,
            calib,
            alpha,
        })
    }
}

/// Cue tokens plus the slot states that produced them.
#[derive(Clone, Copy, Debug)]
pub struct CueBundle {
    pub s0: Var,
    pub s1: Var,
    pub s2: Var,
    pub cues: Var,
}

/// Whether the slots read the visual tokens. `Bypass` skips both visual
/// blocks, so the cues are the calibration of `S1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VisualRoute {
    #[default]
    Attend,
    Bypass,
}

/// `S0 = S_seed + tanh(gamma) · offset(MeanPool(q))`, pooling only the valid
/// question rows.
pub fn init_slots<T: Real>(g: &mut Graph<'_, T>, q: Tokens, p: &CteParams) -> Result<Var> {
    let q = q.real(g)?.ok_or(Error::EmptyQuestion)?;
    let pooled = g.mean(q, 0)?;
    let off = p.offset.forward(g, pooled)?;
    let gamma = g.param(p.gamma);
    let gate = g.tanh(gamma);
    let off = g.mul(off, gate)?;
    let seed = g.param(p.seed_slots);
    g.add(seed, off)
}

/// One text block over the question, then two visual blocks over the image.
/// Returns `(S1, S2)`.
pub fn retrieve<T: Real>(
    g: &mut Graph<'_, T>,
    s0: Var,
    q: Tokens,
    v: Tokens,
    p: &CteParams,
    route: VisualRoute,
) -> Result<(Var, Var)> {
    if v.valid == 0 {
        return Err(Error::EmptyVisual);
    }
    if q.valid == 0 {
        return Err(Error::EmptyQuestion);
    }
    let s1 = xblock(g, s0, q, &p.text)?;
    let s2 = match route {
        VisualRoute::Attend => {
            let h = xblock(g, s1, v, &p.visual[0])?;
            xblock(g, h, v, &p.visual[1])?
        }
        VisualRoute::Bypass => s1,
    };
    Ok((s1, s2))
}

/// `C0 = LN(S2·W_P)`, `Δ = MLP(C0)`, `C = C0 + tanh(alpha) · (σ(Δ) ⊙ Δ)`.
pub fn calibrate<T: Real>(g: &mut Graph<'_, T>, s2: Var, p: &CteParams) -> Result<Var> {
    let c0 = p.proj.forward(g, s2)?;
    let c0 = p.post_norm.forward(g, c0)?;
    let delta = p.calib.forward(g, c0)?;
    let w = g.sigmoid(delta);
    let gated = g.mul(w, delta)?;
    let alpha = g.param(p.alpha);
    let a = g.tanh(alpha);
    let gated = g.mul(gated, a)?;
    g.add(c0, gated)
}

pub fn extract_cues<T: Real>(
    g: &mut Graph<'_, T>,
    q: Tokens,
    v: Tokens,
    p: &CteParams,
) -> Result<CueBundle> {
    extract_cues_routed(g, q, v, p, VisualRoute::Attend)
}

pub fn extract_cues_routed<T: Real>(
    g: &mut Graph<'_, T>,
    q: Tokens,
    v: Tokens,
    p: &CteParams,
    route: VisualRoute,
) -> Result<CueBundle> {
    let s0 = init_slots(g, q, p)?;
    let (s1, s2) = retrieve(g, s0, q, v, p, route)?;
    let cues = calibrate(g, s2, p)?;
    Ok(CueBundle { s0, s1, s2, cues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, GradCheckConfig, LN_EPS};

    fn small() -> CteConfig {
        CteConfig {
            k: 3,
            d_slot: 8,
            d_llm: 8,
            d_visual: 6,
            heads: 2,
            xblock_ffn: true,
            gate_init: 0.5,
        }
    }

    fn build(cfg: CteConfig, seed: u64) -> (ParamStore<f64>, CteParams, Init) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let p = CteParams::new(&mut store, &mut init, "cte", cfg).unwrap();
        (store, p, init)
    }

    fn set(store: &mut ParamStore<f64>, id: ParamId, rows: &[Vec<f64>]) {
        *store.get_mut(id) = Tensor::from_rows(rows);
    }

    fn run(
        store: &ParamStore<f64>,
        p: &CteParams,
        q: &Tensor<f64>,
        v: &Tensor<f64>,
        route: VisualRoute,
    ) -> [Tensor<f64>; 4] {
        let mut g = Graph::with_params(store);
        let (qv, vv) = (g.constant(q.clone()), g.constant(v.clone()));
        let (qt, vt) = (Tokens::full(&g, qv), Tokens::full(&g, vv));
        let b = extract_cues_routed(&mut g, qt, vt, p, route).unwrap();
        [b.s0, b.s1, b.s2, b.cues].map(|x| g.value(x).clone())
    }

    #[test]
    fn slots_equal_seed_at_init() {
        let (mut store, p, mut init) = build(small(), 1);
        set(&mut store, p.gamma, &[vec![2.3]]);
        let q: Tensor<f64> = init.normal(&[4, 8], 1.0);
        let mut g = Graph::with_params(&store);
        let qv = g.constant(q);
        let qt = Tokens::full(&g, qv);
        let s0 = init_slots(&mut g, qt, &p).unwrap();
        assert!(g.value(s0).bitwise_eq(store.get(p.seed_slots)));
    }

    #[test]
    fn zero_gamma_ignores_offset() {
        let (mut store, p, mut init) = build(small(), 2);
        init.jitter(&mut store, 0.5);
        set(&mut store, p.gamma, &[vec![0.0]]);
        let q: Tensor<f64> = init.normal(&[4, 8], 1.0);
        let mut g = Graph::with_params(&store);
        let qv = g.constant(q);
        let qt = Tokens::full(&g, qv);
        let s0 = init_slots(&mut g, qt, &p).unwrap();
        assert!(g.value(s0).bitwise_eq(store.get(p.seed_slots)));
    }

    #[test]
    fn slot_init_hand_oracle() {
        let cfg = CteConfig { k: 2, d_slot: 1, d_llm: 1, d_visual: 1, heads: 1, ..small() };
        let (mut store, p, _) = build(cfg, 0);
        set(&mut store, p.seed_slots, &[vec![1.0], vec![2.0]]);
        set(&mut store, p.offset.b.unwrap(), &[vec![0.5]]);
        set(&mut store, p.gamma, &[vec![3f64.ln()]]);
        // tanh(ln 3) = (9 - 1) / (9 + 1)
        let t = 0.8;
        let mut g = Graph::with_params(&store);
        let qv = g.constant(Tensor::from_rows(&[vec![7.0], vec![-3.0]]));
        let qt = Tokens::full(&g, qv);
        let s0 = init_slots(&mut g, qt, &p).unwrap();
        let got = g.value(s0).data();
        assert!((got[0] - (1.0 + t * 0.5)).abs() < 1e-12);
        assert!((got[1] - (2.0 + t * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn mean_pool_skips_padding() {
        let (mut store, p, mut init) = build(small(), 3);
        init.jitter(&mut store, 0.3);
        let q: Tensor<f64> = init.normal(&[3, 8], 1.0);
        let mut padded = q.data().to_vec();
        padded.extend(std::iter::repeat(9.0).take(16));
        let padded = Tensor::new(&[5, 8], padded).unwrap();
        let mut g = Graph::with_params(&store);
        let (a, b) = (g.constant(q), g.constant(padded));
        let ta = Tokens::full(&g, a);
        let x = init_slots(&mut g, ta, &p).unwrap();
        let y = init_slots(&mut g, Tokens { var: b, valid: 3 }, &p).unwrap();
        assert!(g.value(x).bitwise_eq(g.value(y)));
    }

    #[test]
    fn empty_inputs_error() {
        let (store, p, _) = build(small(), 4);
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::zeros(&[2, 8]));
        let v = g.constant(Tensor::zeros(&[2, 6]));
        let qt = Tokens { var: q, valid: 0 };
        let vt = Tokens::full(&g, v);
        let err = extract_cues(&mut g, qt, vt, &p).unwrap_err();
        assert_eq!(err.to_string(), "empty question");
        let qt = Tokens::full(&g, q);
        let err = extract_cues(&mut g, qt, Tokens { var: v, valid: 0 }, &p).unwrap_err();
        assert_eq!(err.to_string(), "empty visual context");
    }

    #[test]
    fn retrievers_are_identity_at_init() {
        let (store, p, mut init) = build(small(), 5);
        let q = init.normal(&[4, 8], 1.0);
        let v = init.normal(&[5, 6], 1.0);
        let [s0, s1, s2, _] = run(&store, &p, &q, &v, VisualRoute::Attend);
        assert!(s1.bitwise_eq(&s0) && s2.bitwise_eq(&s0));
    }

    #[test]
    fn constant_function_at_init() {
        let (store, p, mut init) = build(small(), 6);
        // Independent oracle: LN(S_seed · W_P) row by row.
        let (seed, wp) = (store.get(p.seed_slots), store.get(p.proj.w));
        let mut expect = Vec::new();
        for r in 0..3 {
            let row: Vec<f64> = (0..8)
                .map(|o| (0..8).map(|i| seed.at(r, i) * wp.at(o, i)).sum())
                .collect();
            let mu = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 8.0;
            expect.extend(row.iter().map(|x| (x - mu) / (var + LN_EPS).sqrt()));
        }
        let expect = Tensor::new(&[3, 8], expect).unwrap();
        for n_q in [1, 3, 6] {
            let q = init.normal(&[n_q, 8], 2.0);
            let v = init.normal(&[4, 6], 2.0);
            let [.., c] = run(&store, &p, &q, &v, VisualRoute::Attend);
            assert!(c.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn calibration_gates() {
        let (mut store, p, mut init) = build(small(), 7);
        init.jitter(&mut store, 0.4);
        let s2: Tensor<f64> = init.normal(&[3, 8], 1.0);
        let c_and_c0 = |store: &ParamStore<f64>| {
            let mut g = Graph::with_params(store);
            let s = g.constant(s2.clone());
            let c = calibrate(&mut g, s, &p).unwrap();
            let c0 = p.proj.forward(&mut g, s).unwrap();
            let c0 = p.post_norm.forward(&mut g, c0).unwrap();
            (g.value(c).clone(), g.value(c0).clone())
        };
        let mut st = store.clone();
        set(&mut st, p.alpha, &[vec![0.0]]);
        let (c, c0) = c_and_c0(&st);
        assert!(c.max_abs_diff(&c0) < 1e-15);

        let mut st = store.clone();
        *st.get_mut(p.calib.down.w) = Tensor::zeros(&[8, 32]);
        *st.get_mut(p.calib.down.b.unwrap()) = Tensor::zeros(&[1, 8]);
        let (c, c0) = c_and_c0(&st);
        assert!(c.bitwise_eq(&c0));
    }

    #[test]
    fn calibration_hand_oracle() {
        let cfg = CteConfig { k: 1, d_slot: 1, d_llm: 1, d_visual: 1, heads: 1, ..small() };
        let (mut store, p, _) = build(cfg, 0);
        // d = 1: LN output is its bias, so C0 = 2.
        set(&mut store, p.post_norm.bias, &[vec![2.0]]);
        // Δ = 1 through the down-projection bias alone.
        set(&mut store, p.calib.down.b.unwrap(), &[vec![1.0]]);
        set(&mut store, p.alpha, &[vec![0.5f64.atanh()]]);
        let mut g = Graph::with_params(&store);
        let s = g.constant(Tensor::full(&[1, 1], 0.3));
        let c = calibrate(&mut g, s, &p).unwrap();
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.value(c).data()[0] - (2.0 + 0.5 * sig1)).abs() < 1e-12);
        assert!((g.value(c).data()[0] - 2.3655).abs() < 1e-3);
    }

    fn trained_like(seed: u64) -> (ParamStore<f64>, CteParams, Init) {
        let (mut store, p, mut init) = build(small(), seed);
        init.jitter(&mut store, 0.3);
        (store, p, init)
    }

    #[test]
    fn visual_order_is_irrelevant() {
        let (store, p, mut init) = trained_like(8);
        let q = init.normal(&[4, 8], 1.0);
        let v: Tensor<f64> = init.normal(&[5, 6], 1.0);
        let rows: Vec<Vec<f64>> = (0..5).map(|r| v.row(r).to_vec()).collect();
        let perm = [3, 0, 4, 1, 2].map(|i| rows[i].clone());
        let vp = Tensor::from_rows(&perm);
        let [_, _, a, ca] = run(&store, &p, &q, &v, VisualRoute::Attend);
        let [_, _, b, cb] = run(&store, &p, &q, &vp, VisualRoute::Attend);
        assert!(a.max_abs_diff(&b) < 1e-6);
        assert!(ca.max_abs_diff(&cb) < 1e-6);
    }

    #[test]
    fn deterministic_and_sensitive() {
        let (store, p, mut init) = trained_like(9);
        let q = init.normal(&[4, 8], 1.0);
        let v: Tensor<f64> = init.normal(&[5, 6], 1.0);
        let [.., c1] = run(&store, &p, &q, &v, VisualRoute::Attend);
        let [.., c2] = run(&store, &p, &q, &v, VisualRoute::Attend);
        assert!(c1.bitwise_eq(&c2));
        let mut v2 = v.clone();
        v2.data_mut()[6] += 0.5;
        let [.., c3] = run(&store, &p, &q, &v2, VisualRoute::Attend);
        assert!(c1.max_abs_diff(&c3) > 0.0);
    }

    #[test]
    fn bypass_reproduces_text_only_cues() {
        let (store, p, mut init) = trained_like(10);
        let q = init.normal(&[4, 8], 1.0);
        let v = init.normal(&[5, 6], 1.0);
        let [_, s1, s2, c] = run(&store, &p, &q, &v, VisualRoute::Bypass);
        assert!(s2.bitwise_eq(&s1));
        let mut g = Graph::with_params(&store);
        let s = g.constant(s1);
        let expect = calibrate(&mut g, s, &p).unwrap();
        assert!(g.value(expect).bitwise_eq(&c));
        let v2 = init.normal(&[5, 6], 3.0);
        let [.., c2] = run(&store, &p, &q, &v2, VisualRoute::Bypass);
        assert!(c2.bitwise_eq(&c));
    }

    #[test]
    fn retrieve_gradients() {
        let (mut store, p, mut init) = trained_like(11);
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, id == p.seed_slots);
        }
        let q = store.add("q", init.normal(&[4, 8], 1.0));
        // Wider context rows keep the LN truncation error of the central
        // difference well under the tolerance.
        let v = store.add("v", init.normal(&[5, 6], 2.0));
        let rep = finite_diff_check(
            |g| {
                let (qv, vv) = (g.param(q), g.param(v));
                let (qt, vt) = (Tokens::full(g, qv), Tokens::full(g, vv));
                let s0 = init_slots(g, qt, &p)?;
                let (_, s2) = retrieve(g, s0, qt, vt, &p, VisualRoute::Attend)?;
                Ok(g.sum(s2))
            },
            &store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn end_to_end_gradients() {
        let (store, p, mut init) = trained_like(12);
        let q: Tensor<f64> = init.normal(&[4, 8], 1.0);
        let v: Tensor<f64> = init.normal(&[5, 6], 1.0);
        let w: Tensor<f64> = init.normal(&[3, 8], 1.0);
        let rep = finite_diff_check(
            |g| {
                let (qv, vv) = (g.constant(q.clone()), g.constant(v.clone()));
                let (qt, vt) = (Tokens::full(g, qv), Tokens::full(g, vv));
                let b = extract_cues(g, qt, vt, &p)?;
                let wv = g.constant(w.clone());
                let prod = g.mul(b.cues, wv)?;
                Ok(g.sum(prod))
            },
            &store,
            &GradCheckConfig { coords_per_param: 6, ..Default::default() },
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
