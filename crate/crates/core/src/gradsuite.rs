//! Fixed-input gradient checks for every differentiable component, in 64-bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cte::{extract_cues, CteConfig, CteParams};
use crate::decoder::DecoderConfig;
use crate::diffcore::{finite_diff_check, GradCheckConfig, Graph, Init, ParamStore, Tensor, Var, WeightScale, NEG_LARGE};
use crate::error::Result;
use crate::layers::{xblock, Tokens, XBlockParams};
use crate::masking::{BottleneckMode, MaskKind};
use crate::toyvqa::vocab::VOCAB_SIZE;
use crate::toyvqa::{batch_loss, gen_dataset, CueVariant, DataConfig, ModelConfig, ToySample, VqaArch};

/// Largest relative error any entry may report.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub component: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub worst: Option<String>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

type Builder = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

fn uniform(init: &mut Init, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| init.rng().random_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<'_, f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

fn entry(component: &str, store: &ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Result<Var>, cfg: &GradCheckConfig) -> Result<SuiteEntry> {
    let rep = finite_diff_check(f, store, cfg)?;
    Ok(SuiteEntry {
        component: component.into(),
        max_rel_err: rep.max_rel_err,
        coords: rep.coords_checked,
        worst: rep.worst.map(|(n, i)| format!("{n}[{i}]")),
    })
}

fn primitives(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let (m, k, n) = (3, 4, 5);
    let mut mask = Tensor::zeros(&[m, n]);
    mask.data_mut()[n - 1] = NEG_LARGE;
    let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
        ("matmul", vec![vec![m, k], vec![k, n]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_t", vec![vec![m, k], vec![n, k]], Box::new(|g, v| g.matmul_t(v[0], v[1]))),
        ("add", vec![vec![m, n], vec![1, n]], Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", vec![vec![m, n], vec![m, 1]], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![vec![m, n]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("tanh", vec![vec![m, n]], Box::new(|g, v| Ok(g.tanh(v[0])))),
        ("sigmoid", vec![vec![m, n]], Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("mean", vec![vec![m, n]], Box::new(|g, v| g.mean(v[0], 1))),
        (
            "layer_norm",
            vec![vec![m, n], vec![1, n], vec![1, n]],
            Box::new(|g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]))),
        ),
        (
            "softmax_masked",
            vec![vec![m, n]],
            Box::new(move |g, v| g.softmax_masked(v[0], Some(&mask))),
        ),
        ("concat_rows", vec![vec![m, n], vec![k, n]], Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![vec![m, n], vec![m, k]], Box::new(|g, v| g.concat_cols(&[v[0], v[1]]))),
        ("slice_rows", vec![vec![m + 1, n]], Box::new(|g, v| g.slice_rows(v[0], 1, 2))),
        ("slice_cols", vec![vec![m, n]], Box::new(|g, v| g.slice_cols(v[0], 1, 3))),
        ("gather", vec![vec![n, k]], Box::new(|g, v| g.gather(v[0], &[0, 4, 0]))),
        (
            "cross_entropy",
            vec![vec![m, n]],
            Box::new(|g, v| g.cross_entropy(v[0], &[(0, 1), (1, 4), (2, 0)])),
        ),
    ];
    let mut out = Vec::new();
    for (i, (name, shapes, op)) in cases.iter().enumerate() {
        let mut init = Init::new(seed.wrapping_add(i as u64));
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| store.add(format!("x{j}"), uniform(&mut init, s)))
            .collect();
        let w = {
            let mut g = Graph::with_params(&store);
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            let y = op(&mut g, &vars)?;
            uniform(&mut init, g.value(y).shape())
        };
        out.push(entry(
            &format!("primitive/{name}"),
            &store,
            |g| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                let y = op(g, &vars)?;
                weighted_sum(g, y, &w)
            },
            cfg,
        )?);
    }
    Ok(out)
}

fn xblock_entry(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteEntry> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let p = XBlockParams::new(&mut store, &mut init, "x", 8, 6, 2, true)?;
    init.jitter(&mut store, 0.3);
    let slots = store.add("slots", init.normal(&[3, 8], 1.0));
    let ctx = store.add("ctx", init.normal(&[5, 6], 1.0));
    let w = init.normal(&[3, 8], 1.0);
    entry(
        "xblock",
        &store,
        |g| {
            let (s, c) = (g.param(slots), g.param(ctx));
            let ctx = Tokens::full(g, c);
            let y = xblock(g, s, ctx, &p)?;
            weighted_sum(g, y, &w)
        },
        cfg,
    )
}

fn cte_entry(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteEntry> {
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let c = CteConfig {
        k: 3,
        d_slot: 8,
        d_llm: 8,
        d_visual: 6,
        heads: 2,
        xblock_ffn: true,
        gate_init: 0.5,
    };
    let p = CteParams::new(&mut store, &mut init, "cte", c)?;
    init.jitter(&mut store, 0.3);
    let q = store.add("q", init.normal(&[4, 8], 1.0));
    let v = store.add("v", init.normal(&[5, 6], 2.0));
    let w = init.normal(&[3, 8], 1.0);
    entry(
        "cte",
        &store,
        |g| {
            let (qv, vv) = (g.param(q), g.param(v));
            let (qt, vt) = (Tokens::full(g, qv), Tokens::full(g, vv));
            let b = extract_cues(g, qt, vt, &p)?;
            weighted_sum(g, b.cues, &w)
        },
        cfg,
    )
}

fn end_to_end_entry(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteEntry> {
    let decoder = DecoderConfig {
        vocab: VOCAB_SIZE,
        d_llm: 16,
        n_layer: 2,
        heads: 2,
        max_len: 40,
        ffn_expand: 2,
        cue_positions: true,
    };
    let mc = ModelConfig {
        g: 4,
        d_embed: 8,
        decoder,
        cte: CteConfig {
            k: 2,
            d_slot: 8,
            d_llm: 16,
            d_visual: 16,
            heads: 2,
            xblock_ffn: true,
            gate_init: 0.5,
        },
        weight_scale: WeightScale::FanIn,
    };
    let mut store = ParamStore::new();
    let mut init = Init::new(seed).with_scale(WeightScale::FanIn);
    let mut arch = VqaArch::backbone(&mut store, &mut init, mc)?;
    arch.add_cues(&mut store, &mut init, CueVariant::Cte, 2)?;
    // Small offsets break the zero-initialized projections without driving
    // the layer norms into high-curvature regions.
    init.jitter(&mut store, 0.02);
    let data = gen_dataset(&DataConfig {
        n_train: 8,
        n_test: 2,
        seed,
        ..Default::default()
    })?;
    let batch: Vec<&ToySample> = data.train.iter().take(2).collect();
    let kind = MaskKind::Bottleneck(BottleneckMode::Prose);
    entry("assemble+forward+answer_loss", &store, |g| batch_loss(g, &arch, &batch, kind), cfg)
}

/// Runs every check: each primitive, the XBlock, the full cue extractor
/// and the end-to-end loss on a two-sample batch. `seed` picks the
/// instances; the tolerance is calibrated for seed 0, and other seeds can
/// land on coordinates where the `O(eps²)` truncation of the central
/// difference alone exceeds it.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let cfg = GradCheckConfig {
        eps: 1e-3,
        coords_per_param: 12,
        seed,
    };
    let mut out = primitives(seed, &cfg)?;
    out.push(xblock_entry(seed, &cfg)?);
    out.push(cte_entry(seed, &cfg)?);
    out.push(end_to_end_entry(seed, &cfg)?);
    Ok(out)
}
