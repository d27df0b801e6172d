//! Training objectives: transducer negative log-likelihood, the joint CE
//! loss over paired speech and injected text, and expected-word-error
//! fine-tuning over N-best lists.

mod joint;
mod mwer;
mod rnnt;

pub use joint::{joint_ce_loss, SpeechItem, TextItem};
pub use mwer::{joint_mwer_loss, mwer_loss, score_alignment, ScoredHypothesis};
pub use rnnt::{rnnt_nll, rnnt_nll_with_fastemit, transducer_nll};

use thiserror::Error;

use crate::autodiff::GraphError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("lattice has no frames")]
    EmptyLattice,
    #[error("lattice of {u_len} label rows does not fit a target of length {target}")]
    LatticeTargetMismatch { u_len: usize, target: usize },
    #[error("both the paired and the text batch are empty")]
    EmptyBatch,
    #[error("empty N-best list")]
    EmptyNBest,
    #[error("loss weights must be non-negative, got {0}")]
    NegativeWeight(f64),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("decode failure inside the loss: {0}")]
    Decode(String),
}

/// Interpolation weights of the training objectives.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Weight of the paired speech-text bracket.
    pub lambda1: f64,
    /// Weight of the unpaired text bracket.
    pub lambda2: f64,
    /// CE interpolation weight during expected-error fine-tuning.
    pub alpha: f64,
    /// Optional early-emission regularizer weight; zero disables it.
    pub fastemit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.1, lambda2: 0.2, alpha: 0.1, fastemit: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for v in [self.lambda1, self.lambda2, self.alpha, self.fastemit] {
            if v < 0.0 {
                return Err(LossError::NegativeWeight(v));
            }
        }
        Ok(())
    }
}

/// Expected-error components of one batch, present only in the fine-tuning
/// phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MwerComponents {
    pub causal_paired: f64,
    pub noncausal_paired: f64,
    pub causal_text: f64,
    pub noncausal_text: f64,
    /// Examples whose beam search returned no hypotheses.
    pub skipped: usize,
}

/// Every loss component of one batch. `total` always reproduces the
/// weighted recomposition of the components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLossReport {
    pub ce_causal_paired: f64,
    pub ce_noncausal_paired: f64,
    pub ce_causal_text: f64,
    pub ce_noncausal_text: f64,
    pub mwer: Option<MwerComponents>,
    pub total: f64,
}

impl BatchLossReport {
    /// The CE objective value implied by the components.
    pub fn ce_total(&self, w: &LossWeights) -> f64 {
        w.lambda1 * (self.ce_causal_paired + self.ce_noncausal_paired)
            + w.lambda2 * (self.ce_causal_text + self.ce_noncausal_text)
    }

    /// Recompute the total from the logged components; matches `total` to
    /// floating-point roundoff.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        match &self.mwer {
            None => self.ce_total(w),
            Some(m) => {
                w.lambda1 * (m.causal_paired + m.noncausal_paired)
                    + w.lambda2 * (m.causal_text + m.noncausal_text)
                    + w.alpha * self.ce_total(w)
            }
        }
    }
}
