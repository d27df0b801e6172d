//! WER evaluation tables and latency reports over decoded test sets.

use std::fmt::Write as _;

use anyhow::{bail, Result};

use crate::autodiff::ParamStore;
use crate::decode::{oracle_wer, streaming_decode, BeamConfig, DecodeTrace};
use crate::metrics::{edit_distance, words, LatencyObservations, LatencyReport};
use crate::model::ModelConfig;
use crate::synth::PairedExample;
use crate::text::Vocab;

/// Reject checkpoints whose parameter set does not match the configured
/// model, naming the first offending parameter.
pub fn verify_checkpoint_shape(store: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let reference = crate::model::init_params(cfg, 0)?;
    for (name, arr) in reference.iter() {
        match store.get(name) {
            Err(_) => bail!("checkpoint is missing parameter {name}"),
            Ok(loaded) if loaded.shape() != arr.shape() => bail!(
                "checkpoint parameter {name} has shape {:?}, the model expects {:?}",
                loaded.shape(),
                arr.shape()
            ),
            Ok(_) => {}
        }
    }
    for (name, _) in store.iter() {
        if reference.get(name).is_err() {
            bail!("checkpoint carries unknown parameter {name}");
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub test_set: String,
    /// Second-pass WER percentage (the default reporting decoder).
    pub wer: f64,
    pub first_pass_wer: f64,
    /// Oracle WER over the second-pass N-best.
    pub oracle_wer: f64,
}

#[derive(Debug, Clone)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub checkpoint: String,
    pub config_hash: String,
}

impl EvalTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("checkpoint {}\nconfig {}\n", self.checkpoint, self.config_hash);
        let _ = writeln!(s, "{:<12} {:>8} {:>12} {:>10}", "test_set", "wer%", "first_pass%", "oracle%");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>8.2} {:>12.2} {:>10.2}",
                r.test_set, r.wer, r.first_pass_wer, r.oracle_wer
            );
        }
        s
    }

    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "eval\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                r.test_set, r.wer, r.first_pass_wer, r.oracle_wer, self.checkpoint, self.config_hash
            );
        }
        s
    }
}

/// Decode one split with both passes.
pub fn decode_split(
    store: &ParamStore,
    cfg: &ModelConfig,
    examples: &[PairedExample],
    beam: &BeamConfig,
    vocab: &Vocab,
) -> Result<Vec<(DecodeTrace, DecodeTrace)>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        out.push(streaming_decode(store, cfg, &ex.features, beam, vocab)?);
    }
    Ok(out)
}

/// Aggregate WERs for one decoded split.
pub fn eval_row(
    name: &str,
    examples: &[PairedExample],
    traces: &[(DecodeTrace, DecodeTrace)],
) -> Result<EvalRow> {
    let mut errors_second = 0usize;
    let mut errors_first = 0usize;
    let mut errors_oracle = 0usize;
    let mut ref_words = 0usize;
    for (ex, (first, second)) in examples.iter().zip(traces) {
        let reference = words(&ex.transcript);
        ref_words += reference.len();
        errors_second += edit_distance(&words(second.top_text()), &reference).total;
        errors_first += edit_distance(&words(first.top_text()), &reference).total;
        errors_oracle += oracle_wer(&second.nbest, &reference)?;
    }
    if ref_words == 0 {
        bail!("test set {name} has no reference words");
    }
    let pct = |e: usize| 100.0 * e as f64 / ref_words as f64;
    Ok(EvalRow {
        test_set: name.to_string(),
        wer: pct(errors_second),
        first_pass_wer: pct(errors_first),
        oracle_wer: pct(errors_oracle),
    })
}

/// Evaluate a checkpoint over named test sets.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    sets: &[(&str, &[PairedExample])],
    beam: &BeamConfig,
    vocab: &Vocab,
    checkpoint: &str,
    config_hash: &str,
) -> Result<EvalTable> {
    let mut rows = Vec::with_capacity(sets.len());
    for (name, examples) in sets {
        let traces = decode_split(store, cfg, examples, beam, vocab)?;
        rows.push(eval_row(name, examples, &traces)?);
    }
    Ok(EvalTable {
        rows,
        checkpoint: checkpoint.to_string(),
        config_hash: config_hash.to_string(),
    })
}

/// Streaming quality of one split: endpointer and partial latencies from the
/// first-pass trace, pass agreement for the prefetch hit rate.
pub fn latency_report(
    store: &ParamStore,
    cfg: &ModelConfig,
    examples: &[PairedExample],
    beam: &BeamConfig,
    vocab: &Vocab,
) -> Result<LatencyReport> {
    let mut obs = LatencyObservations::default();
    for ex in examples {
        let (first, second) = streaming_decode(store, cfg, &ex.features, beam, vocab)?;
        let endpoint = crate::metrics::endpointer_latency(&first, ex.utt_end_ms);
        let partial = crate::metrics::partial_latency(&first, &ex.transcript, ex.utt_end_ms);
        let agree = first.top_text() == second.top_text();
        obs.push(endpoint, partial, agree);
    }
    Ok(obs.report()?)
}
