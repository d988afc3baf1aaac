use crate::diffcore::{Graph, Init, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{AdaptedLinear, Linear, WeightInit};

/// Multi-head attention projections. Queries come from `model_dim`, keys and
/// values from `context_dim`; heads split the projected width evenly.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: AdaptedLinear,
    pub wk: AdaptedLinear,
    pub wv: AdaptedLinear,
    pub wo: Linear,
    pub head_count: usize,
    pub head_dim: usize,
}

impl MhaParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        model_dim: usize,
        context_dim: usize,
        head_count: usize,
        out_init: WeightInit,
    ) -> Result<Self> {
        if head_count == 0 || model_dim % head_count != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} not divisible by head_count {head_count}"
            )));
        }
        let proj = |store: &mut ParamStore<T>, init: &mut Init, n: &str, input: usize| {
            AdaptedLinear::plain(Linear::new(
                store,
                init,
                &format!("{name}.{n}"),
                input,
                model_dim,
                false,
                WeightInit::Gaussian,
            ))
        };
        let wq = proj(store, init, "wq", model_dim);
        let wk = proj(store, init, "wk", context_dim);
        let wv = proj(store, init, "wv", context_dim);
        let wo = Linear::new(store, init, &format!("{name}.wo"), model_dim, model_dim, true, out_init);
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            head_count,
            head_dim: model_dim / head_count,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.head_count * self.head_dim
    }
}

/// One attention problem inside row-stacked query and key/value matrices.
#[derive(Clone, Debug)]
pub struct Segment<'m, T> {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
    /// Additive `[q_len, kv_len]` mask, or `None` for full visibility.
    pub mask: Option<&'m Tensor<T>>,
}

/// Scaled dot-product multi-head attention of `queries` over `keys_values`.
pub fn mha<T: Real>(
    g: &mut Graph<'_, T>,
    queries: Var,
    keys_values: Var,
    mask: Option<&Tensor<T>>,
    p: &MhaParams,
) -> Result<Var> {
    let seg = Segment {
        q_start: 0,
        q_len: g.value(queries).rows(),
        kv_start: 0,
        kv_len: g.value(keys_values).rows(),
        mask,
    };
    mha_segments(g, queries, keys_values, &[seg], p)
}

/// Attention over several independent sequences stacked along rows. The
/// projections run once over the whole stack; attention runs per segment.
/// Segments must tile the query rows in order.
pub fn mha_segments<T: Real>(
    g: &mut Graph<'_, T>,
    queries: Var,
    keys_values: Var,
    segments: &[Segment<'_, T>],
    p: &MhaParams,
) -> Result<Var> {
    let q = p.wq.forward(g, queries)?;
    let k = p.wk.forward(g, keys_values)?;
    let v = p.wv.forward(g, keys_values)?;
    let scale = 1.0 / (p.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(p.head_count);
    for h in 0..p.head_count {
        let (qh, kh, vh) = if p.head_count == 1 {
            (q, k, v)
        } else {
            let off = h * p.head_dim;
            (
                g.slice_cols(q, off, p.head_dim)?,
                g.slice_cols(k, off, p.head_dim)?,
                g.slice_cols(v, off, p.head_dim)?,
            )
        };
        let mut outs = Vec::with_capacity(segments.len());
        for s in segments {
            if let Some(m) = s.mask {
                if m.rows() != s.q_len || m.cols() != s.kv_len {
                    return Err(Error::Shape {
                        op: "mha mask",
                        lhs: vec![s.q_len, s.kv_len],
                        rhs: m.shape().to_vec(),
                    });
                }
            }
            let qs = slice_or_whole(g, qh, s.q_start, s.q_len)?;
            let ks = slice_or_whole(g, kh, s.kv_start, s.kv_len)?;
            let vs = slice_or_whole(g, vh, s.kv_start, s.kv_len)?;
            let logits = g.matmul_t(qs, ks)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax_masked(logits, s.mask)?;
            outs.push(g.matmul(attn, vs)?);
        }
        heads.push(if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_rows(&outs)?
        });
    }
    let o = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    p.wo.forward(g, o)
}

fn slice_or_whole<T: Real>(g: &mut Graph<'_, T>, x: Var, start: usize, len: usize) -> Result<Var> {
    if start == 0 && len == g.value(x).rows() {
        Ok(x)
    } else {
        g.slice_rows(x, start, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::NEG_LARGE;
    use proptest::prelude::*;

    /// Per-element attention, straight from the definition.
    fn brute_force(
        store: &ParamStore<f64>,
        p: &MhaParams,
        x: &Tensor<f64>,
        ctx: &Tensor<f64>,
        mask: Option<&Tensor<f64>>,
    ) -> Vec<f64> {
        let proj = |w: &Tensor<f64>, m: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..m.rows())
                .map(|r| {
                    (0..w.rows())
                        .map(|o| (0..w.cols()).map(|i| m.at(r, i) * w.at(o, i)).sum())
                        .collect()
                })
                .collect()
        };
        let q = proj(store.get(p.wq.base.w), x);
        let k = proj(store.get(p.wk.base.w), ctx);
        let v = proj(store.get(p.wv.base.w), ctx);
        let d = p.model_dim();
        let mut concat = vec![vec![0.0; d]; x.rows()];
        for h in 0..p.head_count {
            let cols = h * p.head_dim..(h + 1) * p.head_dim;
            for i in 0..x.rows() {
                let mut logits: Vec<f64> = (0..ctx.rows())
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>()
                            / (p.head_dim as f64).sqrt()
                            + mask.map_or(0.0, |m| m.at(i, j))
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                logits.iter_mut().for_each(|l| *l = (*l - mx).exp());
                let z: f64 = logits.iter().sum();
                for c in cols.clone() {
                    concat[i][c] = (0..ctx.rows()).map(|j| logits[j] / z * v[j][c]).sum();
                }
            }
        }
        let wo = store.get(p.wo.w);
        let bo = store.get(p.wo.b.unwrap());
        let mut out = Vec::new();
        for row in &concat {
            for o in 0..d {
                out.push(bo.data()[o] + (0..d).map(|i| row[i] * wo.at(o, i)).sum::<f64>());
            }
        }
        out
    }

    fn random_mha(seed: u64, d: usize, ctx_d: usize, heads: usize) -> (ParamStore<f64>, MhaParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let p = MhaParams::new(&mut store, &mut init, "a", d, ctx_d, heads, WeightInit::Gaussian).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = init.normal(&shape, 0.5);
        }
        (store, p)
    }

    #[test]
    fn single_key_returns_its_value() {
        let (store, p) = random_mha(1, 4, 4, 2);
        let mut init = Init::new(2);
        let x: Tensor<f64> = init.normal(&[3, 4], 1.0);
        let ctx: Tensor<f64> = init.normal(&[1, 4], 1.0);
        let mut g = Graph::with_params(&store);
        let (xv, cv) = (g.constant(x), g.constant(ctx));
        let out = mha(&mut g, xv, cv, None, &p).unwrap();
        let v = p.wv.forward(&mut g, cv).unwrap();
        let expect = p.wo.forward(&mut g, v).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((g.value(out).at(r, c) - g.value(expect).at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        let p = MhaParams::new(&mut store, &mut init, "a", 2, 2, 1, WeightInit::Gaussian).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        for w in [p.wq.base.w, p.wk.base.w, p.wv.base.w, p.wo.w] {
            *store.get_mut(w) = eye.clone();
        }
        let mut g = Graph::with_params(&store);
        // The query is orthogonal to the key difference, so logits tie.
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let kv = g.constant(Tensor::from_rows(&[vec![0.5, 3.0], vec![0.5, -1.0]]));
        let out = mha(&mut g, q, kv, None, &p).unwrap();
        assert!(g.value(out).max_abs_diff(&Tensor::from_rows(&[vec![0.5, 1.0]])) < 1e-12);
    }

    #[test]
    fn three_by_four_matches_brute_force() {
        let (store, p) = random_mha(7, 8, 6, 4);
        let mut init = Init::new(8);
        let x = init.normal(&[3, 8], 1.0);
        let ctx = init.normal(&[4, 6], 1.0);
        let mut mask = Tensor::<f64>::zeros(&[3, 4]);
        mask.data_mut()[1] = NEG_LARGE;
        let mut g = Graph::with_params(&store);
        let (xv, cv) = (g.constant(x.clone()), g.constant(ctx.clone()));
        let out = mha(&mut g, xv, cv, Some(&mask), &p).unwrap();
        let expect = brute_force(&store, &p, &x, &ctx, Some(&mask));
        let diff = g.value(out).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn fully_masked_row_propagates() {
        let (store, p) = random_mha(3, 4, 4, 2);
        let mut mask = Tensor::<f64>::zeros(&[2, 2]);
        mask.data_mut()[2] = NEG_LARGE;
        mask.data_mut()[3] = NEG_LARGE;
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::full(&[2, 4], 0.1));
        let err = mha(&mut g, x, x, Some(&mask), &p).unwrap_err();
        assert!(err.to_string().contains("fully-masked attention row"));
    }

    #[test]
    fn segments_match_separate_calls() {
        let (store, p) = random_mha(4, 8, 8, 4);
        let mut init = Init::new(5);
        let a: Tensor<f64> = init.normal(&[3, 8], 1.0);
        let b: Tensor<f64> = init.normal(&[2, 8], 1.0);
        let mut g = Graph::with_params(&store);
        let (av, bv) = (g.constant(a), g.constant(b));
        let both = g.concat_rows(&[av, bv]).unwrap();
        let segs = [
            Segment { q_start: 0, q_len: 3, kv_start: 0, kv_len: 3, mask: None },
            Segment { q_start: 3, q_len: 2, kv_start: 3, kv_len: 2, mask: None },
        ];
        let joint = mha_segments(&mut g, both, both, &segs, &p).unwrap();
        let sa = mha(&mut g, av, av, None, &p).unwrap();
        let sb = mha(&mut g, bv, bv, None, &p).unwrap();
        let sep = g.concat_rows(&[sa, sb]).unwrap();
        assert!(g.value(joint).max_abs_diff(g.value(sep)) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mha_matches_brute_force(seed in any::<u64>(), lq in 1usize..=8, lk in 1usize..=8, heads in prop::sample::select(vec![1usize, 2, 4])) {
            let (store, p) = random_mha(seed, 8, 8, heads);
            let mut init = Init::new(seed ^ 0x55);
            let x = init.normal(&[lq, 8], 1.0);
            let ctx = init.normal(&[lk, 8], 1.0);
            // Random mask that keeps at least one key per row.
            let mut mask = Tensor::<f64>::zeros(&[lq, lk]);
            for i in 0..lq {
                for j in 0..lk {
                    if (i * 7 + j * 3 + seed as usize) % 3 == 0 && j != i % lk {
                        mask.data_mut()[i * lk + j] = NEG_LARGE;
                    }
                }
            }
            let mut g = Graph::with_params(&store);
            let (xv, cv) = (g.constant(x.clone()), g.constant(ctx.clone()));
            let out = mha(&mut g, xv, cv, Some(&mask), &p).unwrap();
            prop_assert_eq!(g.value(out).shape(), &[lq, 8]);
            let expect = brute_force(&store, &p, &x, &ctx, Some(&mask));
            let diff = g.value(out).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-6, "{}", diff);
        }
    }
}
