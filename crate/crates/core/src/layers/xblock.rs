use crate::diffcore::{Graph, Init, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::layers::{mha, Ffn, LayerNorm, MhaParams, WeightInit};

/// Rows of a token matrix whose first `valid` rows are real tokens and whose
/// tail (if any) is padding.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub var: Var,
    pub valid: usize,
}

impl Tokens {
    pub fn full<T: Real>(g: &Graph<'_, T>, var: Var) -> Self {
        Self {
            var,
            valid: g.value(var).rows(),
        }
    }

    /// The non-padding prefix, or `None` when there is none.
    pub fn real<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Option<Var>> {
        if self.valid == 0 {
            Ok(None)
        } else if self.valid == g.value(self.var).rows() {
            Ok(Some(self.var))
        } else {
            g.slice_rows(self.var, 0, self.valid).map(Some)
        }
    }
}

/// Pre-norm cross-attention block: slots attend to a normalized context,
/// then an optional feed-forward sublayer. Both sublayer output projections start at
/// zero, making a fresh block the identity on its slots.
#[derive(Clone, Debug)]
pub struct XBlockParams {
    pub ln_attn: LayerNorm,
    pub ln_ctx: LayerNorm,
    pub attn: MhaParams,
    pub ffn: Option<(LayerNorm, Ffn)>,
}

pub const FFN_EXPAND: usize = 4;

impl XBlockParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        slot_dim: usize,
        context_dim: usize,
        head_count: usize,
        with_ffn: bool,
    ) -> Result<Self> {
        let ln_attn = LayerNorm::new(store, &format!("{name}.ln_attn"), slot_dim);
        let ln_ctx = LayerNorm::new(store, &format!("{name}.ln_ctx"), context_dim);
        let attn = MhaParams::new(
            store,
            init,
            &format!("{name}.attn"),
            slot_dim,
            context_dim,
            head_count,
            WeightInit::Zero,
        )?;
        let ffn = with_ffn.then(|| {
            (
                LayerNorm::new(store, &format!("{name}.ln_ffn"), slot_dim),
                Ffn::new(store, init, &format!("{name}.ffn"), slot_dim, FFN_EXPAND, WeightInit::Zero),
            )
        });
        Ok(Self { ln_attn, ln_ctx, attn, ffn })
    }
}

/// `s = slots + MHA(LN(slots), LN(context))`, then `s + FFN(LN(s))`.
pub fn xblock<T: Real>(
    g: &mut Graph<'_, T>,
    slots: Var,
    context: Tokens,
    p: &XBlockParams,
) -> Result<Var> {
    let ctx = context.real(g)?.ok_or(Error::EmptyContext)?;
    let h = p.ln_attn.forward(g, slots)?;
    let ctx = p.ln_ctx.forward(g, ctx)?;
    let a = mha(g, h, ctx, None, &p.attn)?;
    let mut s = g.add(slots, a)?;
    if let Some((ln, ffn)) = &p.ffn {
        let h = ln.forward(g, s)?;
        let f = ffn.forward(g, h)?;
        s = g.add(s, f)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, GradCheckConfig, Tensor};

    #[test]
    fn identity_at_init() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(3);
        let p = XBlockParams::new(&mut store, &mut init, "x", 8, 12, 4, true).unwrap();
        let slots: Tensor<f32> = init.normal(&[5, 8], 1.0);
        let ctx: Tensor<f32> = init.normal(&[7, 12], 1.0);
        let mut g = Graph::with_params(&store);
        let s = g.constant(slots.clone());
        let c = g.constant(ctx);
        let ctx = Tokens::full(&g, c);
        let out = xblock(&mut g, s, ctx, &p).unwrap();
        assert!(g.value(out).bitwise_eq(&slots));
    }

    #[test]
    fn empty_context_errors() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(3);
        let p = XBlockParams::new(&mut store, &mut init, "x", 4, 4, 2, true).unwrap();
        let mut g = Graph::with_params(&store);
        let s = g.constant(Tensor::zeros(&[2, 4]));
        let c = g.constant(Tensor::zeros(&[3, 4]));
        let err = xblock(&mut g, s, Tokens { var: c, valid: 0 }, &p).unwrap_err();
        assert_eq!(err.to_string(), "XBlock requires nonempty context");
    }

    #[test]
    fn scalar_hand_oracle() {
        // d = 1: LN of a single value is exactly its bias, attention over one
        // key has weight 1, so the block is closed-form.
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(0);
        let p = XBlockParams::new(&mut store, &mut init, "x", 1, 1, 1, true).unwrap();
        let set = |store: &mut ParamStore<f64>, id, v: f64| *store.get_mut(id) = Tensor::full(&[1, 1], v);
        let (wv, wo, bo) = (0.7, -1.3, 0.2);
        set(&mut store, p.attn.wq.base.w, 2.0);
        set(&mut store, p.attn.wk.base.w, -0.5);
        set(&mut store, p.attn.wv.base.w, wv);
        set(&mut store, p.attn.wo.w, wo);
        set(&mut store, p.attn.wo.b.unwrap(), bo);
        set(&mut store, p.ln_attn.bias, 0.4);
        set(&mut store, p.ln_ctx.bias, -2.0);
        let (ln2, ffn) = p.ffn.as_ref().unwrap();
        set(&mut store, ln2.bias, 0.9);
        *store.get_mut(ffn.up.w) = Tensor::from_rows(&[vec![0.5], vec![-1.0], vec![2.0], vec![0.1]]);
        *store.get_mut(ffn.up.b.unwrap()) = Tensor::from_rows(&[vec![0.0, 0.1, -0.2, 0.3]]);
        *store.get_mut(ffn.down.w) = Tensor::from_rows(&[vec![1.0, 0.5, -0.25, 2.0]]);
        set(&mut store, ffn.down.b.unwrap(), -0.1);

        // The context value itself is irrelevant: its LN is the bias, -2.
        let (s0, c) = (1.5, -2.0);
        let s1 = s0 + wo * (wv * c) + bo;
        let hidden = [0.5 * 0.9, -0.9 + 0.1, 1.8 - 0.2, 0.09 + 0.3];
        let down = [1.0, 0.5, -0.25, 2.0];
        let s2 = s1 + hidden.iter().zip(down).map(|(h, w): (&f64, f64)| h.tanh() * w).sum::<f64>() - 0.1;

        let mut g = Graph::with_params(&store);
        let sv = g.constant(Tensor::full(&[1, 1], s0));
        let cv = g.constant(Tensor::full(&[1, 1], 7.0));
        let ctx = Tokens::full(&g, cv);
        let out = xblock(&mut g, sv, ctx, &p).unwrap();
        assert!((g.value(out).data()[0] - s2).abs() < 1e-12);
    }

    #[test]
    fn context_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(21);
        let p = XBlockParams::new(&mut store, &mut init, "x", 8, 6, 2, true).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            let noise = init.normal(&shape, 0.3);
            let t = store.get_mut(id);
            for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
                *a += b;
            }
            store.set_trainable(id, false);
        }
        let slots = store.add("slots", init.normal(&[3, 8], 1.0));
        let ctx = store.add("ctx", init.normal(&[5, 6], 1.0));
        let w: Tensor<f64> = init.normal(&[3, 8], 1.0);
        let rep = finite_diff_check(
            |g| {
                let (s, c) = (g.param(slots), g.param(ctx));
                let ctx = Tokens::full(g, c);
                let out = xblock(g, s, ctx, &p)?;
                let wv = g.constant(w.clone());
                let prod = g.mul(out, wv)?;
                Ok(g.sum(prod))
            },
            &store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
