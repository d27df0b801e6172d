//! Named parameter storage, initialization and the SGD update.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use super::array::Array;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0}")]
    Duplicate(String),
    #[error("unknown parameter {0}")]
    Unknown(String),
    #[error("parameter {name} became non-finite after update")]
    NonFinite { name: String },
    #[error("gradient shape {grad:?} does not match parameter {name} of shape {param:?}")]
    GradShape { name: String, grad: Vec<usize>, param: Vec<usize> },
}

/// Table of named trainable arrays. Iteration is always in name order, which
/// keeps updates and serialization deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
    rng_seed: u64,
}

/// Outcome of one SGD step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore { params: BTreeMap::new(), rng_seed }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<(), ParamError> {
        if self.params.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Insert a tensor initialized uniformly in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn init_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<(), ParamError> {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-s..=s)).collect();
        self.insert(name, Array::new(shape, data))
    }

    pub fn get(&self, name: &str) -> Result<&Array, ParamError> {
        self.params.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array, ParamError> {
        self.params.get_mut(name).ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|a| a.numel()).sum()
    }

    /// Plain SGD with global gradient-norm clipping. Gradients are consumed
    /// in name order; every parameter must stay finite afterwards.
    pub fn sgd_step(
        &mut self,
        grads: &BTreeMap<String, Array>,
        lr: f64,
        clip: f64,
    ) -> Result<StepStats, ParamError> {
        let mut sq = 0.0;
        for (name, g) in grads {
            let p = self.get(name)?;
            if g.shape() != p.shape() {
                return Err(ParamError::GradShape {
                    name: name.clone(),
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * scale * gv;
            }
            if !p.all_finite() {
                return Err(ParamError::NonFinite { name: name.clone() });
            }
        }
        Ok(StepStats { grad_norm: norm, clipped: norm > clip })
    }
}
