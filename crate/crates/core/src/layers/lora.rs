//! Low-rank adapters around frozen linear maps.

use crate::diffcore::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var, INIT_STD};
use crate::error::{Error, Result};
use crate::layers::Linear;

/// Default LoRA alpha; the effective scale is `alpha / rank`.
pub const LORA_ALPHA: f64 = 16.0;

/// Low-rank update `scale · B·A` for a base weight `W: [out, in]`.
///
/// `A: [rank, in]` is Gaussian-initialized and `B: [out, rank]` starts at zero,
/// so a freshly attached adapter leaves the base output untouched.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn attach<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        base_name: &str,
        base: &Linear,
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        let min_dim = base.in_dim.min(base.out_dim);
        if rank == 0 || rank >= min_dim {
            return Err(Error::Config(format!(
                "LoRA rank {rank} must satisfy 1 <= rank < min(in, out) = {min_dim}"
            )));
        }
        let a = store.add(format!("{base_name}.lora_a"), init.normal(&[rank, base.in_dim], INIT_STD));
        let b = store.add(
            format!("{base_name}.lora_b"),
            Tensor::zeros(&[base.out_dim, rank]),
        );
        Ok(Self {
            a,
            b,
            rank,
            scale: alpha / rank as f64,
        })
    }
}

/// A linear map that may carry a LoRA adapter.
#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub lora: Option<LoraAdapter>,
}

impl AdaptedLinear {
    pub fn plain(base: Linear) -> Self {
        Self { base, lora: None }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match &self.lora {
            Some(a) => lora_apply(g, x, &self.base, a),
            None => self.base.forward(g, x),
        }
    }
}

/// `x·Wᵀ (+ bias) + scale·(x·Aᵀ)·Bᵀ`.
pub fn lora_apply<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    base: &Linear,
    adapter: &LoraAdapter,
) -> Result<Var> {
    let y = base.forward(g, x)?;
    let a = g.param(adapter.a);
    let b = g.param(adapter.b);
    let down = g.matmul_t(x, a)?;
    let up = g.matmul_t(down, b)?;
    let up = g.scale(up, adapter.scale);
    g.add(y, up)
}
