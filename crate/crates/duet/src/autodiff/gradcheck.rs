//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::array::Array;
use super::params::ParamStore;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("loss evaluation failed: {0}")]
    Eval(String),
    #[error("loss is non-finite while perturbing parameter {0}")]
    NonFiniteLoss(String),
    #[error("analytic gradients missing for parameter {0}")]
    MissingGrad(String),
}

/// Result of one loss evaluation: the scalar value and, when requested,
/// analytic gradients for every parameter.
pub struct LossEval {
    pub value: f64,
    pub grads: BTreeMap<String, Array>,
}

/// Which entries of each parameter tensor to difference.
#[derive(Debug, Clone, Copy)]
pub enum CheckMode {
    /// Every entry of every tensor.
    Exhaustive,
    /// A fixed number of seeded random entries per tensor.
    Sampled { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for c in &self.per_param {
            out.push_str(&format!(
                "param={} checked={} max_rel_err={:.3e}\n",
                c.name, c.checked, c.max_rel_err
            ));
        }
        out.push_str(&format!(
            "gradcheck {} (tolerance {:.1e}, worst {:.3e})\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.max_rel_err()
        ));
        out
    }
}

/// Relative error with a floor on the denominator so that near-zero gradient
/// pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare analytic gradients against central finite differences.
///
/// `eval` must be deterministic given the store: it is called once with
/// `want_grads = true` at the base point and twice per checked entry for the
/// differences. A non-finite loss during perturbation fails the owning
/// parameter by name.
pub fn finite_diff_check<F>(
    mut eval: F,
    params: &mut ParamStore,
    step: f64,
    tolerance: f64,
    mode: CheckMode,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&ParamStore, bool) -> Result<LossEval, String>,
{
    let base = eval(params, true).map_err(GradCheckError::Eval)?;
    if !base.value.is_finite() {
        return Err(GradCheckError::NonFiniteLoss("<unperturbed>".into()));
    }
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    let mut per_param = Vec::with_capacity(names.len());
    let mut rng = match mode {
        CheckMode::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        CheckMode::Exhaustive => None,
    };

    for name in names {
        let analytic = base
            .grads
            .get(&name)
            .ok_or_else(|| GradCheckError::MissingGrad(name.clone()))?
            .clone();
        let numel = analytic.numel();
        let indices: Vec<usize> = match mode {
            CheckMode::Exhaustive => (0..numel).collect(),
            CheckMode::Sampled { per_param, .. } => {
                let rng = rng.as_mut().expect("sampled mode has rng");
                (0..per_param.min(numel)).map(|_| rng.gen_range(0..numel)).collect()
            }
        };
        let mut max_err = 0.0f64;
        for &idx in &indices {
            let orig = params.get(&name).expect("known param").data()[idx];
            params.get_mut(&name).expect("known param").data_mut()[idx] = orig + step;
            let up = eval(params, false).map_err(GradCheckError::Eval)?.value;
            params.get_mut(&name).expect("known param").data_mut()[idx] = orig - step;
            let down = eval(params, false).map_err(GradCheckError::Eval)?.value;
            params.get_mut(&name).expect("known param").data_mut()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(GradCheckError::NonFiniteLoss(name.clone()));
            }
            let fd = (up - down) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic.data()[idx], fd));
        }
        per_param.push(ParamCheck { name, max_rel_err: max_err, checked: indices.len() });
    }
    Ok(GradCheckReport { per_param, tolerance })
}
