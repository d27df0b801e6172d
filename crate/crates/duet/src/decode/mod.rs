//! Frame-synchronous streaming beam search over HAT outputs.
//!
//! Each hypothesis is one alignment: its score is the plain sum of the
//! chosen HAT log-probabilities, with no length normalization, and its path
//! records every step so the alignment can be re-scored differentiably.
//! Hypotheses that emit EOS freeze; identical label sequences keep only the
//! best-scoring alignment. Ties break by lexicographic label order.

use std::collections::HashMap;

use thiserror::Error;

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::metrics::{edit_distance, words};
use crate::model::{
    col_label, encoder_forward, hat_cell, pred_projection, prediction_forward,
    DecoderPass, EncoderInput, EncoderStates, JointContext, ModelConfig, ModelError,
};
use crate::synth::PairedExample;
use crate::text::{Vocab, EOS_ID, MASK_ID, PAD_ID};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("empty N-best list")]
    EmptyNBest,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Blank,
    Label(u32),
    /// Frame advanced because the per-frame symbol cap was hit; carries no
    /// score.
    Forced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub frame: usize,
    pub kind: StepKind,
}

/// One alignment hypothesis.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Emitted label ids, blanks excluded; EOS, if present, is final.
    pub labels: Vec<u32>,
    /// Sum of the chosen HAT log-probabilities along the alignment.
    pub log_prob: f64,
    /// Rendered text of the labels (specials dropped).
    pub text: String,
    /// The full alignment, for differentiable re-scoring.
    pub path: Vec<PathStep>,
}

impl Hypothesis {
    pub fn ended(&self) -> bool {
        self.labels.last() == Some(&EOS_ID)
    }

    pub fn last_emit_frame(&self) -> Option<usize> {
        self.path.iter().rev().find_map(|s| match s.kind {
            StepKind::Label(_) => Some(s.frame),
            _ => None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Partial {
    pub frame: usize,
    pub wall_ms: f64,
    pub text: String,
}

/// Everything one beam-search pass produced, timestamped.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub pass: DecoderPass,
    pub partials: Vec<Partial>,
    pub nbest: Vec<Hypothesis>,
    /// First frame at which the running top hypothesis ended in EOS.
    pub eos_frame: Option<usize>,
    pub forced_advances: usize,
    pub frame_ms: f64,
    pub lookahead_ms: f64,
}

impl DecodeTrace {
    pub fn top_text(&self) -> &str {
        self.nbest.first().map(|h| h.text.as_str()).unwrap_or("")
    }

    pub fn eos_wall_ms(&self) -> Option<f64> {
        self.eos_frame.map(|f| (f + 1) as f64 * self.frame_ms + self.lookahead_ms)
    }

    fn pass_name(&self) -> &'static str {
        match self.pass {
            DecoderPass::First => "first",
            DecoderPass::Second => "second",
        }
    }

    /// Line-delimited dump: one `partial,...` record per partial, the EOS
    /// and forced-advance events, then the N-best with 6-decimal scores.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let pass = self.pass_name();
        for p in &self.partials {
            out.push_str(&format!("partial,{pass},{},{:.0},{}\n", p.frame, p.wall_ms, p.text));
        }
        if let Some(f) = self.eos_frame {
            out.push_str(&format!(
                "eos,{pass},{f},{:.0}\n",
                self.eos_wall_ms().expect("eos frame implies a wall time")
            ));
        }
        if self.forced_advances > 0 {
            out.push_str(&format!("forced,{pass},{}\n", self.forced_advances));
        }
        for (rank, h) in self.nbest.iter().enumerate() {
            out.push_str(&format!("nbest,{pass},{},{:.6},{}\n", rank + 1, h.log_prob, h.text));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 8, max_symbols_per_frame: 4 }
    }
}

struct Item {
    hyp: Hypothesis,
    advanced: bool,
}

fn hyp_order(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .expect("finite scores")
        .then_with(|| a.labels.cmp(&b.labels))
}

/// Keep the best-scoring alignment per label sequence, then the top `keep`
/// by score (ties lexicographic in labels).
fn prune(hyps: Vec<Hypothesis>, keep: usize) -> Vec<Hypothesis> {
    let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut out: Vec<Hypothesis> = Vec::new();
    for h in hyps {
        match index.get(&h.labels) {
            Some(&i) => {
                if h.log_prob > out[i].log_prob {
                    out[i] = h;
                }
            }
            None => {
                index.insert(h.labels.clone(), out.len());
                out.push(h);
            }
        }
    }
    out.sort_by(hyp_order);
    out.truncate(keep);
    out
}

/// Cache of projected prediction states keyed by the last two labels.
struct PredCache {
    map: HashMap<[u32; 2], NodeId>,
}

impl PredCache {
    fn new() -> Self {
        PredCache { map: HashMap::new() }
    }

    fn get(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        pass: DecoderPass,
        labels: &[u32],
    ) -> Result<NodeId, ModelError> {
        let n = labels.len();
        let key = [
            if n >= 2 { labels[n - 2] } else { PAD_ID },
            if n >= 1 { labels[n - 1] } else { PAD_ID },
        ];
        if let Some(&id) = self.map.get(&key) {
            return Ok(id);
        }
        let state = prediction_forward(g, store, cfg, pass, labels)?;
        let proj = pred_projection(g, store, pass, state)?;
        self.map.insert(key, proj);
        Ok(proj)
    }
}

/// Frame-synchronous beam search over encoder states.
pub fn beam_search(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pass: DecoderPass,
    enc: &EncoderStates,
    beam: &BeamConfig,
    vocab: &Vocab,
) -> Result<DecodeTrace, DecodeError> {
    let lookahead_ms = if pass == DecoderPass::Second { cfg.lookahead_ms() } else { 0.0 };
    let mut ctx = JointContext::new(g, store, enc, pass)?;
    let mut preds = PredCache::new();

    let root = Hypothesis { labels: Vec::new(), log_prob: 0.0, text: String::new(), path: Vec::new() };
    let mut items = vec![Item { hyp: root, advanced: false }];
    let mut partials: Vec<Partial> = Vec::new();
    let mut eos_frame = None;
    let mut forced_advances = 0usize;
    let mut last_partial = String::new();

    for t in 0..enc.len {
        // EOS-frozen hypotheses keep their slot and score but never expand
        for item in items.iter_mut() {
            item.advanced = item.hyp.ended();
        }
        for _round in 0..beam.max_symbols_per_frame {
            if items.iter().all(|i| i.advanced) {
                break;
            }
            let mut pool: Vec<Item> = Vec::new();
            for item in items.drain(..) {
                if item.advanced {
                    pool.push(item);
                    continue;
                }
                let proj = preds.get(g, store, cfg, pass, &item.hyp.labels)?;
                let out = hat_cell(g, store, &mut ctx, t, proj)?;
                let blank_lp = g.value(out.blank_lp).item();
                let label_lps = g.value(out.label_lp).data().to_vec();

                let mut blank_hyp = item.hyp.clone();
                blank_hyp.log_prob += blank_lp;
                blank_hyp.path.push(PathStep { frame: t, kind: StepKind::Blank });
                pool.push(Item { hyp: blank_hyp, advanced: true });

                for (col, &lp) in label_lps.iter().enumerate() {
                    let id = col_label(col);
                    if id == MASK_ID || id == PAD_ID {
                        continue;
                    }
                    let mut h = item.hyp.clone();
                    h.log_prob += lp;
                    h.labels.push(id);
                    h.path.push(PathStep { frame: t, kind: StepKind::Label(id) });
                    h.text = vocab.decode(&h.labels);
                    pool.push(Item { hyp: h, advanced: id == EOS_ID });
                }
            }
            // best alignment per (labels, advanced) state, then top beam_size
            let mut index: HashMap<(Vec<u32>, bool), usize> = HashMap::new();
            let mut kept: Vec<Item> = Vec::new();
            for item in pool {
                let key = (item.hyp.labels.clone(), item.advanced);
                match index.get(&key) {
                    Some(&i) => {
                        if item.hyp.log_prob > kept[i].hyp.log_prob {
                            kept[i] = item;
                        }
                    }
                    None => {
                        index.insert(key, kept.len());
                        kept.push(item);
                    }
                }
            }
            kept.sort_by(|a, b| {
                hyp_order(&a.hyp, &b.hyp).then_with(|| a.advanced.cmp(&b.advanced))
            });
            kept.truncate(beam.beam_size);
            items = kept;
        }
        for item in items.iter_mut() {
            if !item.advanced {
                item.hyp.path.push(PathStep { frame: t, kind: StepKind::Forced });
                item.advanced = true;
                forced_advances += 1;
            }
        }

        // partial + endpoint tracking against the current best hypothesis
        let top = match items.iter().map(|i| &i.hyp).max_by(|a, b| hyp_order(b, a)) {
            Some(top) => top,
            None => continue,
        };
        if top.text != last_partial {
            last_partial = top.text.clone();
            partials.push(Partial {
                frame: t,
                wall_ms: (t + 1) as f64 * cfg.frame_ms + lookahead_ms,
                text: top.text.clone(),
            });
        }
        if eos_frame.is_none() && top.ended() {
            eos_frame = Some(t);
        }
    }

    let nbest = prune(items.into_iter().map(|i| i.hyp).collect(), beam.beam_size);
    Ok(DecodeTrace {
        pass,
        partials,
        nbest,
        eos_frame,
        forced_advances,
        frame_ms: cfg.frame_ms,
        lookahead_ms,
    })
}

/// Decode one utterance with both passes: the first over causal states with
/// wall-offset equal to frame time, the second over cascaded states with the
/// declared lookahead added to every timestamp.
pub fn streaming_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    features: &crate::autodiff::Array,
    beam: &BeamConfig,
    vocab: &Vocab,
) -> Result<(DecodeTrace, DecodeTrace), DecodeError> {
    let mut g = Graph::new();
    let (causal, cascaded) = encoder_forward(&mut g, store, cfg, EncoderInput::Speech(features))?;
    let first = beam_search(&mut g, store, cfg, DecoderPass::First, &causal, beam, vocab)?;
    let second = beam_search(&mut g, store, cfg, DecoderPass::Second, &cascaded, beam, vocab)?;
    Ok((first, second))
}

/// Minimal word errors over an N-best list.
pub fn oracle_wer(nbest: &[Hypothesis], reference: &[String]) -> Result<usize, DecodeError> {
    if nbest.is_empty() {
        return Err(DecodeError::EmptyNBest);
    }
    Ok(nbest
        .iter()
        .map(|h| edit_distance(&words(&h.text), reference).total)
        .min()
        .expect("non-empty list"))
}

/// Decode a whole evaluation split, producing per-utterance traces.
pub fn decode_set(
    store: &ParamStore,
    cfg: &ModelConfig,
    examples: &[PairedExample],
    beam: &BeamConfig,
    vocab: &Vocab,
) -> Result<Vec<(DecodeTrace, DecodeTrace)>, DecodeError> {
    examples
        .iter()
        .map(|ex| streaming_decode(store, cfg, &ex.features, beam, vocab))
        .collect()
}

#[cfg(test)]
mod tests;
