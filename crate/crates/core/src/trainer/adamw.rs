use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, plus the shared step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One decoupled-weight-decay Adam update. Frozen parameters are skipped;
/// any non-finite gradient aborts the step before anything is written.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (id, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
        }
        if g.shape() != store.get(*id).shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: store.get(*id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    for (id, g) in grads {
        if !store.is_trainable(*id) {
            continue;
        }
        let n = g.len();
        let (m, v) = state.moments[id.0].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let w = store.get_mut(*id).data_mut();
        for i in 0..n {
            let gi = g.data()[i].f64();
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            let wi = w[i].f64();
            w[i] = T::lit(wi - lr * (update + cfg.weight_decay * wi));
        }
    }
    Ok(())
}
