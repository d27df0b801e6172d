//! Expected-word-error training over N-best lists, on both modalities.

use crate::autodiff::{Array, Graph, NodeId, ParamStore};
use crate::decode::{beam_search, BeamConfig, Hypothesis, StepKind};
use crate::metrics::{edit_distance, words};
use crate::model::{
    encoder_forward, hat_cell, label_col, pred_projection, prediction_matrix, DecoderPass,
    EncoderInput, EncoderStates, JointContext, ModelConfig,
};
use crate::text::Vocab;

use super::joint::{ce_terms, mean_node, SpeechItem, TextItem};
use super::{BatchLossReport, LossError, LossWeights, MwerComponents};

/// One N-best entry ready for the expected-error objective: its alignment
/// log-probability as a graph node, and its word-error count against the
/// reference (a constant).
pub struct ScoredHypothesis {
    pub log_prob: NodeId,
    pub word_errors: f64,
}

/// Expected word-error deviation over an N-best list:
/// `sum_i softmax(log P)_i * (W_i - mean W)`. Probabilities are normalized
/// within the list, so common scaling of the hypothesis probabilities leaves
/// the value unchanged; gradients flow only into the log-probabilities.
pub fn mwer_loss(g: &mut Graph, nbest: &[ScoredHypothesis]) -> Result<NodeId, LossError> {
    if nbest.is_empty() {
        return Err(LossError::EmptyNBest);
    }
    let n = nbest.len();
    let mut rows = Vec::with_capacity(n);
    for h in nbest {
        rows.push(g.reshape(h.log_prob, vec![1, 1])?);
    }
    let lp = g.concat(1, &rows)?;
    let ls = g.log_softmax(lp)?;
    let p = g.exp(ls)?;
    let mean_w = nbest.iter().map(|h| h.word_errors).sum::<f64>() / n as f64;
    let dev = g.constant(Array::row(nbest.iter().map(|h| h.word_errors - mean_w).collect()));
    let prod = g.mul(p, dev)?;
    Ok(g.reduce_sum(prod)?)
}

/// Differentiable log-probability of one decoded alignment: the sum of the
/// blank and label log-probabilities along the hypothesis path (forced
/// advances contribute nothing, exactly as in the beam).
pub fn score_alignment(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    pass: DecoderPass,
    hyp: &Hypothesis,
) -> Result<NodeId, LossError> {
    let mut ctx = JointContext::new(g, store, enc, pass)?;
    let pred = prediction_matrix(g, store, cfg, pass, &hyp.labels)?;
    let pred_proj = pred_projection(g, store, pass, pred)?;
    let mut pred_rows = Vec::with_capacity(hyp.labels.len() + 1);
    for u in 0..=hyp.labels.len() {
        pred_rows.push(g.row(pred_proj, u)?);
    }
    let mut u = 0usize;
    let mut total: Option<NodeId> = None;
    for step in &hyp.path {
        let term = match step.kind {
            StepKind::Forced => continue,
            StepKind::Blank => {
                let out = hat_cell(g, store, &mut ctx, step.frame, pred_rows[u])?;
                out.blank_lp
            }
            StepKind::Label(id) => {
                let out = hat_cell(g, store, &mut ctx, step.frame, pred_rows[u])?;
                u += 1;
                let col = label_col(id);
                g.slice(out.label_lp, vec![0, col], vec![1, col + 1])?
            }
        };
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let total = total.unwrap_or_else(|| g.const_scalar(0.0));
    debug_assert!(
        (g.value(total).item() - hyp.log_prob).abs() < 1e-9,
        "alignment re-score {} diverged from the beam score {}",
        g.value(total).item(),
        hyp.log_prob
    );
    Ok(total)
}

fn mwer_for_pass(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    enc: &EncoderStates,
    pass: DecoderPass,
    reference: &[String],
    beam: &BeamConfig,
    nbest_size: usize,
    vocab: &Vocab,
) -> Result<Option<NodeId>, LossError> {
    let trace = beam_search(g, store, cfg, pass, enc, beam, vocab)
        .map_err(|e| LossError::Decode(e.to_string()))?;
    let hyps: Vec<&Hypothesis> = trace.nbest.iter().take(nbest_size).collect();
    if hyps.is_empty() {
        return Ok(None);
    }
    let mut scored = Vec::with_capacity(hyps.len());
    for h in hyps {
        let log_prob = score_alignment(g, store, cfg, enc, pass, h)?;
        let word_errors = edit_distance(&words(&h.text), reference).total as f64;
        scored.push(ScoredHypothesis { log_prob, word_errors });
    }
    Ok(Some(mwer_loss(g, &scored)?))
}

/// The joint expected-error objective: per-decoder MWER terms on the paired
/// and text batches (each over its own beam-searched N-best), interpolated
/// with the full CE loss weighted by `alpha`. Examples whose beam produced
/// no hypotheses are skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn joint_mwer_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    paired: &[SpeechItem<'_>],
    text: &[TextItem<'_>],
    weights: &LossWeights,
    beam: &BeamConfig,
    nbest_size: usize,
    vocab: &Vocab,
) -> Result<(NodeId, BatchLossReport), LossError> {
    weights.validate()?;
    if paired.is_empty() && text.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let zero = g.const_scalar(0.0);
    let mut skipped = 0usize;
    let mut comp = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for item in paired {
        let (causal, cascaded) =
            encoder_forward(g, store, cfg, EncoderInput::Speech(item.features))?;
        let reference = words(&vocab.decode(item.targets));
        let pairs =
            [(0usize, DecoderPass::First, causal), (1, DecoderPass::Second, cascaded)];
        for (slot, pass, enc) in pairs {
            match mwer_for_pass(g, store, cfg, &enc, pass, &reference, beam, nbest_size, vocab)? {
                Some(node) => comp[slot].push(node),
                None => skipped += 1,
            }
        }
    }
    for item in text {
        let (first, cascaded) = encoder_forward(g, store, cfg, EncoderInput::Text(item.inputs))?;
        let reference = words(&vocab.decode(item.targets));
        let pairs = [(2usize, DecoderPass::First, first), (3, DecoderPass::Second, cascaded)];
        for (slot, pass, enc) in pairs {
            match mwer_for_pass(g, store, cfg, &enc, pass, &reference, beam, nbest_size, vocab)? {
                Some(node) => comp[slot].push(node),
                None => skipped += 1,
            }
        }
    }
    let mean_or_zero = |g: &mut Graph, terms: &[NodeId]| -> Result<NodeId, LossError> {
        if terms.is_empty() {
            Ok(zero)
        } else {
            mean_node(g, terms)
        }
    };
    let causal_paired = mean_or_zero(g, &comp[0])?;
    let noncausal_paired = mean_or_zero(g, &comp[1])?;
    let causal_text = mean_or_zero(g, &comp[2])?;
    let noncausal_text = mean_or_zero(g, &comp[3])?;

    let ce = ce_terms(g, store, cfg, paired, text, weights)?;

    let paired_bracket = g.add(causal_paired, noncausal_paired)?;
    let text_bracket = g.add(causal_text, noncausal_text)?;
    let w1 = g.scale(paired_bracket, weights.lambda1)?;
    let w2 = g.scale(text_bracket, weights.lambda2)?;
    let mwer_part = g.add(w1, w2)?;
    let ce_part = g.scale(ce.total, weights.alpha)?;
    let total = g.add(mwer_part, ce_part)?;

    let report = BatchLossReport {
        ce_causal_paired: g.value(ce.causal_paired).item(),
        ce_noncausal_paired: g.value(ce.noncausal_paired).item(),
        ce_causal_text: g.value(ce.causal_text).item(),
        ce_noncausal_text: g.value(ce.noncausal_text).item(),
        mwer: Some(MwerComponents {
            causal_paired: g.value(causal_paired).item(),
            noncausal_paired: g.value(noncausal_paired).item(),
            causal_text: g.value(causal_text).item(),
            noncausal_text: g.value(noncausal_text).item(),
            skipped,
        }),
        total: g.value(total).item(),
    };
    Ok((total, report))
}
