//! Central finite-difference gradient checking in 64-bit.

use rand::seq::index::sample;

use crate::diffcore::{Graph, Init, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter; every coordinate when the
    /// parameter is smaller.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            coords_per_param: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarSink(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences over the trainable parameters of `params`.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let out = f(&mut g)?;
    let base = g.value(out).data()[0];
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("f(theta) = {base}")));
    }
    g.backward(out)?;
    let analytic = g.param_grads();

    let mut init = Init::new(cfg.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (id, grad) in analytic {
        let n = grad.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(init.rng(), n, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + cfg.eps;
            let plus = eval(&f, &work)?;
            work.get_mut(id).data_mut()[k] = orig - cfg.eps;
            let minus = eval(&f, &work)?;
            work.get_mut(id).data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "perturbed f at {}[{k}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let err = relative_error(grad.data()[k], numeric);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
