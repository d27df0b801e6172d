//! The joint CE objective over paired speech and injected text.

use crate::autodiff::{Array, Graph, NodeId, ParamStore};
use crate::model::{encoder_forward, DecoderPass, EncoderInput, ModelConfig};

use super::rnnt::transducer_nll;
use super::{BatchLossReport, LossError, LossWeights};

/// One paired example prepared for the loss: features plus targets
/// (word-piece ids ending in EOS).
#[derive(Debug, Clone, Copy)]
pub struct SpeechItem<'a> {
    pub features: &'a Array,
    pub targets: &'a [u32],
}

/// One injected text example: the up-sampled masked input ids and the
/// word-piece targets (ending in EOS).
#[derive(Debug, Clone, Copy)]
pub struct TextItem<'a> {
    pub inputs: &'a [u32],
    pub targets: &'a [u32],
}

pub(super) fn mean_node(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId, LossError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64)?)
}

pub(super) struct CeTerms {
    pub causal_paired: NodeId,
    pub noncausal_paired: NodeId,
    pub causal_text: NodeId,
    pub noncausal_text: NodeId,
    pub total: NodeId,
}

/// Build the four per-decoder NLL means and their weighted total.
pub(super) fn ce_terms(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    paired: &[SpeechItem<'_>],
    text: &[TextItem<'_>],
    weights: &LossWeights,
) -> Result<CeTerms, LossError> {
    weights.validate()?;
    if paired.is_empty() && text.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let zero = g.const_scalar(0.0);
    let mut c_paired = Vec::with_capacity(paired.len());
    let mut nc_paired = Vec::with_capacity(paired.len());
    for item in paired {
        let (causal, cascaded) =
            encoder_forward(g, store, cfg, EncoderInput::Speech(item.features))?;
        c_paired.push(transducer_nll(
            g, store, cfg, DecoderPass::First, &causal, item.targets, weights.fastemit,
        )?);
        nc_paired.push(transducer_nll(
            g, store, cfg, DecoderPass::Second, &cascaded, item.targets, weights.fastemit,
        )?);
    }
    let mut c_text = Vec::with_capacity(text.len());
    let mut nc_text = Vec::with_capacity(text.len());
    for item in text {
        let (first, cascaded) = encoder_forward(g, store, cfg, EncoderInput::Text(item.inputs))?;
        c_text.push(transducer_nll(
            g, store, cfg, DecoderPass::First, &first, item.targets, weights.fastemit,
        )?);
        nc_text.push(transducer_nll(
            g, store, cfg, DecoderPass::Second, &cascaded, item.targets, weights.fastemit,
        )?);
    }

    let causal_paired = if c_paired.is_empty() { zero } else { mean_node(g, &c_paired)? };
    let noncausal_paired = if nc_paired.is_empty() { zero } else { mean_node(g, &nc_paired)? };
    let causal_text = if c_text.is_empty() { zero } else { mean_node(g, &c_text)? };
    let noncausal_text = if nc_text.is_empty() { zero } else { mean_node(g, &nc_text)? };

    let paired_bracket = g.add(causal_paired, noncausal_paired)?;
    let text_bracket = g.add(causal_text, noncausal_text)?;
    let w1 = g.scale(paired_bracket, weights.lambda1)?;
    let w2 = g.scale(text_bracket, weights.lambda2)?;
    let total = g.add(w1, w2)?;
    Ok(CeTerms { causal_paired, noncausal_paired, causal_text, noncausal_text, total })
}

/// The joint CE loss: the paired bracket weighted by `lambda1` plus the text
/// bracket weighted by `lambda2`, causal and non-causal decoders weighted
/// equally inside each bracket. Components are example means, so the weights
/// are batch-size independent.
pub fn joint_ce_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    paired: &[SpeechItem<'_>],
    text: &[TextItem<'_>],
    weights: &LossWeights,
) -> Result<(NodeId, BatchLossReport), LossError> {
    let terms = ce_terms(g, store, cfg, paired, text, weights)?;
    let report = BatchLossReport {
        ce_causal_paired: g.value(terms.causal_paired).item(),
        ce_noncausal_paired: g.value(terms.noncausal_paired).item(),
        ce_causal_text: g.value(terms.causal_text).item(),
        ce_noncausal_text: g.value(terms.noncausal_text).item(),
        mwer: None,
        total: g.value(terms.total).item(),
    };
    Ok((terms.total, report))
}
