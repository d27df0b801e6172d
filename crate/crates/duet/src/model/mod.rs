//! The cascaded-encoder transducer.
//!
//! Speech features pass through a causal encoder (zero right context), a
//! subsampling stack, and a shared non-causal cascaded encoder with a bounded
//! acoustic lookahead. Text enters as embeddings of up-sampled masked unit
//! ids and feeds the same shared cascaded encoder; the causal speech encoder
//! is bypassed. Two independent HAT decoders (first pass on causal or raw
//! text states, second pass on cascaded states) each combine a last-two-label
//! prediction network with a joint network.
//!
//! Encoder layers are bounded-context mixing blocks: depthwise temporal
//! convolution with fixed left/right context, a pointwise feed-forward, a
//! residual connection and RMS normalization. The right-context budget per
//! layer makes the total lookahead exactly testable.

use thiserror::Error;

use crate::autodiff::{Array, Graph, GraphError, NodeId, ParamError, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty encoder input")]
    EmptyInput,
    #[error("speech input of {frames} frames is shorter than the subsample factor {subsample}")]
    TooShort { frames: usize, subsample: usize },
    #[error("feature dim {got} does not match configured {want}")]
    FeatureDim { got: usize, want: usize },
    #[error("target length {len} exceeds the configured cap {cap}")]
    TargetTooLong { len: usize, cap: usize },
    #[error("target contains the blank id")]
    BlankInTarget,
    #[error("label id {0} outside the output vocabulary")]
    LabelOutOfRange(u32),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Model hyperparameters. Right context exists only in cascaded layers, so
/// `cascaded_layers * right_context` frames is the model's whole lookahead.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub model_dim: usize,
    pub causal_layers: usize,
    pub cascaded_layers: usize,
    pub left_context: usize,
    pub right_context: usize,
    pub subsample: usize,
    pub ffn_dim: usize,
    pub pred_embed_dim: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    /// Output word-piece vocabulary size (including specials; blank is id 0).
    pub out_vocab: usize,
    /// Text-input vocabulary size (phonemes or word-pieces).
    pub in_vocab: usize,
    /// The prediction network conditions on this many trailing labels.
    pub pred_context: usize,
    /// Milliseconds per encoder output frame.
    pub frame_ms: f64,
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 8,
            model_dim: 32,
            causal_layers: 2,
            cascaded_layers: 3,
            left_context: 3,
            right_context: 2,
            subsample: 2,
            ffn_dim: 64,
            pred_embed_dim: 16,
            pred_dim: 32,
            joint_dim: 32,
            out_vocab: 47,
            in_vocab: 16,
            pred_context: 2,
            frame_ms: 30.0,
            max_target_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn lookahead_frames(&self) -> usize {
        self.cascaded_layers * self.right_context
    }

    /// Total declared acoustic lookahead in milliseconds.
    pub fn lookahead_ms(&self) -> f64 {
        self.lookahead_frames() as f64 * self.frame_ms
    }

    /// Raw input frame duration (before subsampling).
    pub fn raw_frame_ms(&self) -> f64 {
        self.frame_ms / self.subsample as f64
    }

    /// Number of label outputs (the vocabulary without blank).
    pub fn label_count(&self) -> usize {
        self.out_vocab - 1
    }
}

/// Column of the label-logit head for a label id (blank is excluded).
pub fn label_col(id: u32) -> usize {
    id as usize - 1
}

/// Label id corresponding to a label-head column.
pub fn col_label(col: usize) -> u32 {
    col as u32 + 1
}

/// Which decoder a lattice or beam belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderPass {
    First,
    Second,
}

impl DecoderPass {
    pub fn prefix(&self) -> &'static str {
        match self {
            DecoderPass::First => "dec1",
            DecoderPass::Second => "dec2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Causal,
    Cascaded,
    Text,
}

/// Per-frame encoder states inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct EncoderStates {
    pub node: NodeId,
    pub len: usize,
    pub pass: Pass,
}

pub enum EncoderInput<'a> {
    Speech(&'a Array),
    Text(&'a [u32]),
}

/// HAT output for one lattice cell: a blank log-probability and label
/// log-probabilities over the rest of the vocabulary. The exponentials sum
/// to one by construction.
#[derive(Debug, Clone, Copy)]
pub struct HatOutput {
    pub blank_lp: NodeId,
    pub label_lp: NodeId,
}

/// Dense `T' x (U+1)` grid of HAT outputs for one decoder.
pub struct LogitLattice {
    pub t_len: usize,
    pub u_len: usize,
    pub pass: DecoderPass,
    entries: Vec<HatOutput>,
}

impl LogitLattice {
    pub fn at(&self, t: usize, u: usize) -> &HatOutput {
        &self.entries[t * self.u_len + u]
    }

    /// Assemble a lattice from externally built cells (row-major in `t`).
    pub fn from_entries(
        t_len: usize,
        u_len: usize,
        pass: DecoderPass,
        entries: Vec<HatOutput>,
    ) -> LogitLattice {
        assert_eq!(entries.len(), t_len * u_len, "lattice entries must fill the grid");
        LogitLattice { t_len, u_len, pass, entries }
    }
}

// ── parameters ──────────────────────────────────────────────────────────

fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    kernel: usize,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), ParamError> {
    let d = cfg.model_dim;
    store.init_uniform(&format!("{prefix}.conv.w"), vec![kernel, d], kernel, rng)?;
    store.init_uniform(&format!("{prefix}.conv.b"), vec![d], kernel, rng)?;
    store.init_uniform(&format!("{prefix}.ffn.w1"), vec![d, cfg.ffn_dim], d, rng)?;
    store.init_uniform(&format!("{prefix}.ffn.b1"), vec![cfg.ffn_dim], d, rng)?;
    store.init_uniform(&format!("{prefix}.ffn.w2"), vec![cfg.ffn_dim, d], cfg.ffn_dim, rng)?;
    store.init_uniform(&format!("{prefix}.ffn.b2"), vec![d], cfg.ffn_dim, rng)?;
    Ok(())
}

fn init_decoder(
    store: &mut ParamStore,
    pass: DecoderPass,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), ParamError> {
    let p = pass.prefix();
    let pe = cfg.pred_embed_dim;
    let ctx_dim = cfg.pred_context * pe;
    store.init_uniform(&format!("{p}.pred.embed"), vec![cfg.out_vocab, pe], 1, rng)?;
    store.init_uniform(&format!("{p}.pred.w"), vec![ctx_dim, cfg.pred_dim], ctx_dim, rng)?;
    store.init_uniform(&format!("{p}.pred.b"), vec![cfg.pred_dim], ctx_dim, rng)?;
    let j = cfg.joint_dim;
    store.init_uniform(&format!("{p}.joint.enc_w"), vec![cfg.model_dim, j], cfg.model_dim, rng)?;
    store.init_uniform(&format!("{p}.joint.pred_w"), vec![cfg.pred_dim, j], cfg.pred_dim, rng)?;
    store.init_uniform(&format!("{p}.joint.b"), vec![j], cfg.model_dim, rng)?;
    store.init_uniform(&format!("{p}.joint.blank_w"), vec![j, 1], j, rng)?;
    store.init_uniform(&format!("{p}.joint.blank_b"), vec![1], j, rng)?;
    store.init_uniform(&format!("{p}.joint.label_w"), vec![j, cfg.label_count()], j, rng)?;
    store.init_uniform(&format!("{p}.joint.label_b"), vec![cfg.label_count()], j, rng)?;
    Ok(())
}

/// Fresh parameters for the whole model, uniform in `[-1/sqrt(fan_in), ..]`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ParamError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let d = cfg.model_dim;
    store.init_uniform("enc.in_proj.w", vec![cfg.feature_dim, d], cfg.feature_dim, &mut rng)?;
    store.init_uniform("enc.in_proj.b", vec![d], cfg.feature_dim, &mut rng)?;
    for i in 0..cfg.causal_layers {
        init_block(&mut store, &format!("enc.causal{i}"), cfg.left_context + 1, cfg, &mut rng)?;
    }
    let sub_in = cfg.subsample * d;
    store.init_uniform("enc.sub_proj.w", vec![sub_in, d], sub_in, &mut rng)?;
    store.init_uniform("enc.sub_proj.b", vec![d], sub_in, &mut rng)?;
    for i in 0..cfg.cascaded_layers {
        init_block(
            &mut store,
            &format!("enc.cascaded{i}"),
            cfg.left_context + 1 + cfg.right_context,
            cfg,
            &mut rng,
        )?;
    }
    store.init_uniform("text.embed", vec![cfg.in_vocab, d], 1, &mut rng)?;
    init_decoder(&mut store, DecoderPass::First, cfg, &mut rng)?;
    init_decoder(&mut store, DecoderPass::Second, cfg, &mut rng)?;
    Ok(store)
}

fn pull(g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId, ModelError> {
    Ok(g.param(name, store.get(name)?.clone()))
}

// ── encoder ─────────────────────────────────────────────────────────────

/// Rows shifted by `offset` (positive looks ahead), zero-padded at the edges.
fn shift_rows(
    g: &mut Graph,
    x: NodeId,
    t_len: usize,
    d: usize,
    offset: isize,
) -> Result<NodeId, ModelError> {
    if offset == 0 {
        return Ok(x);
    }
    let k = offset.unsigned_abs();
    if k >= t_len {
        return Ok(g.constant(Array::zeros(vec![t_len, d])));
    }
    let zeros = g.constant(Array::zeros(vec![k, d]));
    let out = if offset > 0 {
        let body = g.slice_rows(x, k, t_len)?;
        g.concat(0, &[body, zeros])?
    } else {
        let body = g.slice_rows(x, 0, t_len - k)?;
        g.concat(0, &[zeros, body])?
    };
    Ok(out)
}

/// One bounded-context mixing block.
fn mixing_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    t_len: usize,
    cfg: &ModelConfig,
    right_context: usize,
) -> Result<NodeId, ModelError> {
    let d = cfg.model_dim;
    let lc = cfg.left_context;
    let normed = g.rms_norm(x, NORM_EPS)?;
    let conv_w = pull(g, store, &format!("{prefix}.conv.w"))?;
    let conv_b = pull(g, store, &format!("{prefix}.conv.b"))?;
    let mut acc: Option<NodeId> = None;
    for o in 0..(lc + 1 + right_context) {
        let offset = o as isize - lc as isize;
        let shifted = shift_rows(g, normed, t_len, d, offset)?;
        let w_row = g.row(conv_w, o)?;
        let term = g.mul(shifted, w_row)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let conv = g.add(acc.expect("kernel is non-empty"), conv_b)?;
    let w1 = pull(g, store, &format!("{prefix}.ffn.w1"))?;
    let b1 = pull(g, store, &format!("{prefix}.ffn.b1"))?;
    let w2 = pull(g, store, &format!("{prefix}.ffn.w2"))?;
    let b2 = pull(g, store, &format!("{prefix}.ffn.b2"))?;
    let h1m = g.matmul(conv, w1)?;
    let h1b = g.add(h1m, b1)?;
    let h1 = g.tanh(h1b)?;
    let f = g.matmul(h1, w2)?;
    let fb = g.add(f, b2)?;
    Ok(g.add(x, fb)?)
}

/// Run the encoders. Speech passes through the causal stack (with one
/// subsampling step after the first layer) and then the shared cascaded
/// stack. Text embeds ids and feeds the same cascaded stack directly; its
/// "first pass" states are the raw embeddings.
pub fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    input: EncoderInput<'_>,
) -> Result<(EncoderStates, EncoderStates), ModelError> {
    let (first, len) = match input {
        EncoderInput::Speech(features) => {
            let t = features.shape()[0];
            if t == 0 {
                return Err(ModelError::EmptyInput);
            }
            if t < cfg.subsample {
                return Err(ModelError::TooShort { frames: t, subsample: cfg.subsample });
            }
            if features.shape()[1] != cfg.feature_dim {
                return Err(ModelError::FeatureDim {
                    got: features.shape()[1],
                    want: cfg.feature_dim,
                });
            }
            let x = g.constant(features.clone());
            let w = pull(g, store, "enc.in_proj.w")?;
            let b = pull(g, store, "enc.in_proj.b")?;
            let xm = g.matmul(x, w)?;
            let mut h = g.add(xm, b)?;
            let mut t_len = t;
            h = mixing_block(g, store, "enc.causal0", h, t_len, cfg, 0)?;
            // subsample by stacking adjacent frames and projecting back down
            let t2 = t_len / cfg.subsample;
            let trimmed = if t_len == t2 * cfg.subsample {
                h
            } else {
                g.slice_rows(h, 0, t2 * cfg.subsample)?
            };
            let stacked = g.reshape(trimmed, vec![t2, cfg.subsample * cfg.model_dim])?;
            let sw = pull(g, store, "enc.sub_proj.w")?;
            let sb = pull(g, store, "enc.sub_proj.b")?;
            let sm = g.matmul(stacked, sw)?;
            h = g.add(sm, sb)?;
            t_len = t2;
            for i in 1..cfg.causal_layers {
                h = mixing_block(g, store, &format!("enc.causal{i}"), h, t_len, cfg, 0)?;
            }
            (EncoderStates { node: h, len: t_len, pass: Pass::Causal }, t_len)
        }
        EncoderInput::Text(ids) => {
            if ids.is_empty() {
                return Err(ModelError::EmptyInput);
            }
            let table = pull(g, store, "text.embed")?;
            let e = g.embed(table, ids.to_vec())?;
            (EncoderStates { node: e, len: ids.len(), pass: Pass::Text }, ids.len())
        }
    };
    let mut c = first.node;
    for i in 0..cfg.cascaded_layers {
        c = mixing_block(g, store, &format!("enc.cascaded{i}"), c, len, cfg, cfg.right_context)?;
    }
    Ok((first, EncoderStates { node: c, len, pass: Pass::Cascaded }))
}

// ── prediction network ──────────────────────────────────────────────────

use crate::text::PAD_ID;

fn last_two(history: &[u32]) -> [u32; 2] {
    let n = history.len();
    [
        if n >= 2 { history[n - 2] } else { PAD_ID },
        if n >= 1 { history[n - 1] } else { PAD_ID },
    ]
}

/// Prediction state for one label history. Only the last two labels matter;
/// shorter histories are padded with the start symbol.
pub fn prediction_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pass: DecoderPass,
    history: &[u32],
) -> Result<NodeId, ModelError> {
    let p = pass.prefix();
    let ids = last_two(history).to_vec();
    let table = pull(g, store, &format!("{p}.pred.embed"))?;
    let e = g.embed(table, ids)?;
    let flat = g.reshape(e, vec![1, cfg.pred_context * cfg.pred_embed_dim])?;
    let w = pull(g, store, &format!("{p}.pred.w"))?;
    let b = pull(g, store, &format!("{p}.pred.b"))?;
    let m = g.matmul(flat, w)?;
    let mb = g.add(m, b)?;
    Ok(g.tanh(mb)?)
}

/// Prediction states for every prefix of a target: row `u` is the state
/// after `u` emitted labels.
pub fn prediction_matrix(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pass: DecoderPass,
    target: &[u32],
) -> Result<NodeId, ModelError> {
    let p = pass.prefix();
    let rows = target.len() + 1;
    let mut ids = Vec::with_capacity(2 * rows);
    for u in 0..rows {
        let [a, b] = last_two(&target[..u]);
        ids.push(a);
        ids.push(b);
    }
    let table = pull(g, store, &format!("{p}.pred.embed"))?;
    let e = g.embed(table, ids)?;
    let flat = g.reshape(e, vec![rows, cfg.pred_context * cfg.pred_embed_dim])?;
    let w = pull(g, store, &format!("{p}.pred.w"))?;
    let b = pull(g, store, &format!("{p}.pred.b"))?;
    let m = g.matmul(flat, w)?;
    let mb = g.add(m, b)?;
    Ok(g.tanh(mb)?)
}

// ── HAT joint ───────────────────────────────────────────────────────────

/// Shared per-utterance joint state: the projected encoder frames and bias,
/// reused by every lattice cell and beam expansion.
pub struct JointContext {
    pub pass: DecoderPass,
    pub enc_proj: NodeId,
    bias: NodeId,
    enc_rows: Vec<Option<NodeId>>,
}

impl JointContext {
    pub fn new(
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncoderStates,
        pass: DecoderPass,
    ) -> Result<JointContext, ModelError> {
        let p = pass.prefix();
        let w = pull(g, store, &format!("{p}.joint.enc_w"))?;
        let bias = pull(g, store, &format!("{p}.joint.b"))?;
        let enc_proj = g.matmul(enc.node, w)?;
        Ok(JointContext { pass, enc_proj, bias, enc_rows: vec![None; enc.len] })
    }

    fn enc_row(&mut self, g: &mut Graph, t: usize) -> Result<NodeId, ModelError> {
        if let Some(id) = self.enc_rows[t] {
            return Ok(id);
        }
        let id = g.row(self.enc_proj, t)?;
        self.enc_rows[t] = Some(id);
        Ok(id)
    }
}

/// Project a prediction state (or matrix of states) into the joint space.
pub fn pred_projection(
    g: &mut Graph,
    store: &ParamStore,
    pass: DecoderPass,
    pred: NodeId,
) -> Result<NodeId, ModelError> {
    let w = pull(g, store, &format!("{}.joint.pred_w", pass.prefix()))?;
    Ok(g.matmul(pred, w)?)
}

/// HAT head over a joint hidden row: sigmoid blank probability, and label
/// log-probabilities scaled by the remaining mass.
fn hat_head(
    g: &mut Graph,
    store: &ParamStore,
    pass: DecoderPass,
    hidden: NodeId,
) -> Result<HatOutput, ModelError> {
    let p = pass.prefix();
    let bw = pull(g, store, &format!("{p}.joint.blank_w"))?;
    let bb = pull(g, store, &format!("{p}.joint.blank_b"))?;
    let lw = pull(g, store, &format!("{p}.joint.label_w"))?;
    let lb = pull(g, store, &format!("{p}.joint.label_b"))?;
    let zm = g.matmul(hidden, bw)?;
    let z = g.add(zm, bb)?;
    let lm = g.matmul(hidden, lw)?;
    let logits = g.add(lm, lb)?;
    let blank_lp = g.log_sigmoid(z)?;
    let rest = g.log_one_minus_sigmoid(z)?;
    let sm = g.log_softmax(logits)?;
    let label_lp = g.add(sm, rest)?;
    Ok(HatOutput { blank_lp, label_lp })
}

/// HAT output at frame `t` for a projected prediction row.
pub fn hat_cell(
    g: &mut Graph,
    store: &ParamStore,
    ctx: &mut JointContext,
    t: usize,
    pred_proj_row: NodeId,
) -> Result<HatOutput, ModelError> {
    let e = ctx.enc_row(g, t)?;
    let s = g.add(e, pred_proj_row)?;
    let sb = g.add(s, ctx.bias)?;
    let hidden = g.tanh(sb)?;
    hat_head(g, store, ctx.pass, hidden)
}

/// HAT output from raw states, the one-cell composition used by tests and
/// incremental decoding.
pub fn hat_joint(
    g: &mut Graph,
    store: &ParamStore,
    pass: DecoderPass,
    enc_frame: NodeId,
    pred_state: NodeId,
) -> Result<HatOutput, ModelError> {
    let p = pass.prefix();
    let ew = pull(g, store, &format!("{p}.joint.enc_w"))?;
    let pw = pull(g, store, &format!("{p}.joint.pred_w"))?;
    let b = pull(g, store, &format!("{p}.joint.b"))?;
    let e = g.matmul(enc_frame, ew)?;
    let pr = g.matmul(pred_state, pw)?;
    let s = g.add(e, pr)?;
    let sb = g.add(s, b)?;
    let hidden = g.tanh(sb)?;
    hat_head(g, store, pass, hidden)
}

/// Batched HAT grid for one decoder and target: blank log-probs `[T, U+1]`
/// and the target-label log-probs `[T, U]`, built with whole-grid array ops.
/// Cell-for-cell equal to the [`build_lattice`] route.
pub fn hat_grid(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pass: DecoderPass,
    enc: &EncoderStates,
    target: &[u32],
) -> Result<(NodeId, NodeId), ModelError> {
    check_target(cfg, target)?;
    let p = pass.prefix();
    let t_len = enc.len;
    let u_len = target.len() + 1;
    let rows = t_len * u_len;

    let enc_w = pull(g, store, &format!("{p}.joint.enc_w"))?;
    let bias = pull(g, store, &format!("{p}.joint.b"))?;
    let enc_proj = g.matmul(enc.node, enc_w)?;
    let pred = prediction_matrix(g, store, cfg, pass, target)?;
    let pred_proj = pred_projection(g, store, pass, pred)?;

    let grid = g.outer_row_sum(enc_proj, pred_proj)?;
    let biased = g.add(grid, bias)?;
    let hidden = g.tanh(biased)?;

    let bw = pull(g, store, &format!("{p}.joint.blank_w"))?;
    let bb = pull(g, store, &format!("{p}.joint.blank_b"))?;
    let lw = pull(g, store, &format!("{p}.joint.label_w"))?;
    let lb = pull(g, store, &format!("{p}.joint.label_b"))?;
    let zm = g.matmul(hidden, bw)?;
    let z = g.add(zm, bb)?;
    let lm = g.matmul(hidden, lw)?;
    let logits = g.add(lm, lb)?;

    // log(sigmoid(z)) and log(1 - sigmoid(z)) via row-wise logsumexp with 0
    let zeros = g.constant(Array::zeros(vec![rows, 1]));
    let neg_z = g.neg(z)?;
    let cat_blank = g.concat(1, &[zeros, neg_z])?;
    let lse_blank = g.logsumexp(cat_blank)?;
    let blank_lp = g.neg(lse_blank)?;
    let cat_rest = g.concat(1, &[zeros, z])?;
    let lse_rest = g.logsumexp(cat_rest)?;
    let shift = g.neg(lse_rest)?;

    let blank_mat = g.reshape(blank_lp, vec![t_len, u_len])?;
    let label_mat = if target.is_empty() {
        g.constant(Array::zeros(vec![t_len, 0]))
    } else {
        let sm = g.log_softmax(logits)?;
        let label_lp = g.add(sm, shift)?;
        let cols: Vec<usize> = (0..rows)
            .map(|row| {
                let u = row % u_len;
                if u < target.len() {
                    label_col(target[u])
                } else {
                    0
                }
            })
            .collect();
        let picked = g.gather_cols(label_lp, cols)?;
        let mat = g.reshape(picked, vec![t_len, u_len])?;
        g.slice(mat, vec![0, 0], vec![t_len, target.len()])?
    };
    Ok((blank_mat, label_mat))
}

fn check_target(cfg: &ModelConfig, target: &[u32]) -> Result<(), ModelError> {
    if target.len() > cfg.max_target_len {
        return Err(ModelError::TargetTooLong { len: target.len(), cap: cfg.max_target_len });
    }
    for &id in target {
        if id == crate::text::BLANK_ID {
            return Err(ModelError::BlankInTarget);
        }
        if id as usize >= cfg.out_vocab {
            return Err(ModelError::LabelOutOfRange(id));
        }
    }
    Ok(())
}

/// The full `T' x (U+1)` lattice of HAT outputs for one decoder and target.
pub fn build_lattice(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    pass: DecoderPass,
    enc: &EncoderStates,
    target: &[u32],
) -> Result<LogitLattice, ModelError> {
    check_target(cfg, target)?;
    let mut ctx = JointContext::new(g, store, enc, pass)?;
    let pred = prediction_matrix(g, store, cfg, pass, target)?;
    let pred_proj = pred_projection(g, store, pass, pred)?;
    let u_len = target.len() + 1;
    let mut pred_rows = Vec::with_capacity(u_len);
    for u in 0..u_len {
        pred_rows.push(g.row(pred_proj, u)?);
    }
    let mut entries = Vec::with_capacity(enc.len * u_len);
    for t in 0..enc.len {
        for &pr in &pred_rows {
            entries.push(hat_cell(g, store, &mut ctx, t, pr)?);
        }
    }
    Ok(LogitLattice { t_len: enc.len, u_len, pass, entries })
}
