use crate::diffcore::{Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::Result;

/// How a weight matrix starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    Gaussian,
    Zero,
}

/// Affine map `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        weight: WeightInit,
    ) -> Self {
        let w = match weight {
            WeightInit::Gaussian => init.weight(&[out_dim, in_dim]),
            WeightInit::Zero => Tensor::zeros(&[out_dim, in_dim]),
        };
        let w = store.add(format!("{name}.w"), w);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[1, out_dim])));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul_t(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization with learned gain (ones) and bias (zeros).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, dim], T::one())),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, Some(gain), Some(bias))
    }
}

/// Two-layer feed-forward sublayer with a tanh nonlinearity.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    /// `dim -> expand·dim -> dim`; the down projection starts at `down_init`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        expand: usize,
        down_init: WeightInit,
    ) -> Self {
        let hidden = dim * expand;
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), dim, hidden, true, WeightInit::Gaussian),
            down: Linear::new(store, init, &format!("{name}.down"), hidden, dim, true, down_init),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tanh(h);
        self.down.forward(g, h)
    }
}
