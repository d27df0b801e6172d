//! The training loop: CE phase with modality-mixed minibatches, optional
//! expected-error fine-tuning continuing from the best CE checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{save_checkpoint, Array, Graph};
use crate::decode::BeamConfig;
use crate::loss::{
    joint_ce_loss, joint_mwer_loss, BatchLossReport, LossWeights, SpeechItem, TextItem,
};
use crate::model::ModelConfig;
use crate::synth::Corpus;
use crate::text::{
    build_text_example, estimate_duration_stats, inject, AlignedTranscript, DurationModel,
    DurationScheme, UnitKind, EOS_ID,
};

use super::config::ExperimentConfig;

/// Deterministic sub-stream of the experiment seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_BATCH: u64 = 11;
const STREAM_INJECT: u64 = 12;

/// One text example materialized for the loss.
pub struct PreparedText {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

/// The model-facing view of a loaded corpus: final model dims plus the
/// duration model estimated from the paired alignments.
pub struct TrainContext {
    pub model: ModelConfig,
    pub duration: DurationModel,
    /// Text stream entries: sentence plus the paired-utterance alignment
    /// when the sentence came from the paired set.
    pub text_pool: Vec<(String, Option<usize>)>,
}

impl TrainContext {
    pub fn new(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<TrainContext> {
        let mut model = cfg.model.clone();
        model.feature_dim = cfg.gen.feature_dim;
        model.out_vocab = corpus.wp_vocab.len();
        model.in_vocab = match cfg.text.unit_kind {
            UnitKind::Phoneme => corpus.phone_vocab.len(),
            UnitKind::WordPiece => corpus.wp_vocab.len(),
        };

        let mut duration = DurationModel::new(cfg.text.scheme).with_fixed_len(cfg.text.fixed_len);
        if matches!(cfg.text.scheme, DurationScheme::SubwordDist | DurationScheme::AlignPlusDist) {
            let alignments: Vec<AlignedTranscript> =
                corpus.paired_train.iter().map(|e| e.alignment.clone()).collect();
            let stats =
                estimate_duration_stats(&alignments, cfg.text.unit_kind, &corpus.wp_vocab)
                    .context("estimating duration statistics from paired alignments")?;
            duration = duration.with_stats(stats);
        }

        let mut text_pool: Vec<(String, Option<usize>)> =
            corpus.unpaired_text.iter().map(|s| (s.clone(), None)).collect();
        if cfg.text.scheme == DurationScheme::AlignPlusDist {
            // the paired transcripts join the text stream, alignments attached
            for (i, ex) in corpus.paired_train.iter().enumerate() {
                text_pool.push((ex.transcript.clone(), Some(i)));
            }
        }
        Ok(TrainContext { model, duration, text_pool })
    }

    /// Tokenize, up-sample and mask one sentence of the text stream.
    pub fn prepare_text(
        &self,
        cfg: &ExperimentConfig,
        corpus: &Corpus,
        sentence: &str,
        paired_idx: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<PreparedText> {
        let example =
            build_text_example(sentence, cfg.text.unit_kind, &corpus.wp_vocab, &corpus.lexicon)?;
        let alignment = paired_idx.map(|i| &corpus.paired_train[i].alignment);
        let inputs = inject(
            &example.x_t,
            &self.duration,
            alignment,
            &corpus.wp_vocab,
            cfg.text.unit_kind,
            cfg.text.mask_rate,
            cfg.text.mask_span,
            rng,
        )?;
        let mut targets = example.y_t;
        targets.push(EOS_ID);
        Ok(PreparedText { inputs, targets })
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub mwer_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
    pub aborted: Option<String>,
}

fn log_line(
    log: &mut fs::File,
    phase: &str,
    step: usize,
    report: &BatchLossReport,
    grad_norm: f64,
) -> Result<()> {
    let mut line = format!(
        "step={step} phase={phase} l_c_s={:.12e} l_nc_s={:.12e} l_c_t={:.12e} l_nc_t={:.12e}",
        report.ce_causal_paired,
        report.ce_noncausal_paired,
        report.ce_causal_text,
        report.ce_noncausal_text,
    );
    if let Some(m) = &report.mwer {
        line.push_str(&format!(
            " m_c_s={:.12e} m_nc_s={:.12e} m_c_t={:.12e} m_nc_t={:.12e} skipped={}",
            m.causal_paired, m.noncausal_paired, m.causal_text, m.noncausal_text, m.skipped
        ));
    }
    line.push_str(&format!(" total={:.12e} grad_norm={:.6e}\n", report.total, grad_norm));
    log.write_all(line.as_bytes()).context("writing the training log")
}

fn collect_grads(g: &Graph) -> BTreeMap<String, Array> {
    g.param_grads().into_iter().map(|(n, a)| (n.to_string(), a.clone())).collect()
}

/// Train per the config: CE phase, then the optional expected-error phase
/// continuing from the best CE checkpoint (or from `resume`). On divergence
/// the run aborts and the last written checkpoint stays on disk.
pub fn train(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let ctx = TrainContext::new(cfg, corpus)?;
    let mut store = match resume {
        Some(path) => {
            let loaded = crate::autodiff::load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            super::evaluate::verify_checkpoint_shape(&loaded, &ctx.model)?;
            loaded
        }
        None => crate::model::init_params(&ctx.model, cfg.train.seed)?,
    };

    let log_path = out_dir.join("train.log");
    let mut log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let mut batch_rng = stream_rng(cfg.train.seed, STREAM_BATCH);
    let mut inject_rng = stream_rng(cfg.train.seed, STREAM_INJECT);

    let final_path = out_dir.join("ce_final.ckpt");
    let best_path = out_dir.join("ce_best.ckpt");
    let mut best_ema = f64::INFINITY;
    let mut ema = None::<f64>;
    let mut have_checkpoint = resume.is_some();
    let mut aborted = None;
    let mut steps_run = 0usize;

    let n_text_per_batch = (cfg.train.text_fraction * cfg.train.batch_size as f64).round() as usize;
    let n_paired_per_batch = cfg.train.batch_size - n_text_per_batch.min(cfg.train.batch_size);

    if cfg.train.ce_steps > 0 {
        'steps: for step in 1..=cfg.train.ce_steps {
            let paired_refs: Vec<&crate::synth::PairedExample> = (0..n_paired_per_batch)
                .map(|_| &corpus.paired_train[batch_rng.gen_range(0..corpus.paired_train.len())])
                .collect();
            let mut prepared = Vec::with_capacity(n_text_per_batch);
            for _ in 0..n_text_per_batch.min(cfg.train.batch_size) {
                let (sentence, paired_idx) =
                    &ctx.text_pool[batch_rng.gen_range(0..ctx.text_pool.len())];
                prepared.push(ctx.prepare_text(cfg, corpus, sentence, *paired_idx, &mut inject_rng)?);
            }
            let paired_items: Vec<SpeechItem<'_>> = paired_refs
                .iter()
                .map(|ex| SpeechItem { features: &ex.features, targets: &ex.y })
                .collect();
            let text_items: Vec<TextItem<'_>> = prepared
                .iter()
                .map(|p| TextItem { inputs: &p.inputs, targets: &p.targets })
                .collect();

            let mut g = Graph::new();
            let (node, report) =
                joint_ce_loss(&mut g, &store, &ctx.model, &paired_items, &text_items, &cfg.weights)?;
            if !report.total.is_finite() {
                aborted = Some(format!("non-finite loss at step {step}"));
                break 'steps;
            }
            g.backward(node)?;
            let grads = collect_grads(&g);
            let stats = match store.sgd_step(&grads, cfg.train.lr, 5.0) {
                Ok(stats) => stats,
                Err(crate::autodiff::ParamError::NonFinite { name }) => {
                    aborted = Some(format!("parameter {name} became non-finite at step {step}"));
                    break 'steps;
                }
                Err(e) => return Err(e.into()),
            };
            log_line(&mut log, "ce", step, &report, stats.grad_norm)?;
            steps_run = step;

            let e = match ema {
                Some(prev) => 0.9 * prev + 0.1 * report.total,
                None => report.total,
            };
            ema = Some(e);
            if e < best_ema {
                best_ema = e;
                save_checkpoint(&store, &best_path)?;
                have_checkpoint = true;
            }
            if step % cfg.train.checkpoint_interval == 0 {
                save_checkpoint(&store, &out_dir.join(format!("ce_step{step}.ckpt")))?;
            }
        }
        if aborted.is_none() {
            save_checkpoint(&store, &final_path)?;
            if !best_path.exists() {
                save_checkpoint(&store, &best_path)?;
            }
            have_checkpoint = true;
        }
    } else if let Some(path) = resume {
        // fine-tuning only: the provided checkpoint is the baseline
        fs::copy(path, &final_path).with_context(|| format!("copying {}", path.display()))?;
        fs::copy(path, &best_path).context("copying the resume checkpoint")?;
    }

    let mut mwer_checkpoint = None;
    if cfg.train.mwer_steps > 0 && aborted.is_none() {
        if !have_checkpoint {
            bail!(
                "expected-error fine-tuning requires a converged CE checkpoint; \
                 run a CE phase first or pass --checkpoint"
            );
        }
        // continue from the best CE point
        store = crate::autodiff::load_checkpoint(&best_path)?;
        let beam = BeamConfig {
            beam_size: cfg.decode.beam_size,
            max_symbols_per_frame: cfg.decode.max_symbols,
        };
        let mwer_path = out_dir.join("mwer_final.ckpt");
        'mwer: for step in 1..=cfg.train.mwer_steps {
            let paired_refs: Vec<&crate::synth::PairedExample> = (0..n_paired_per_batch)
                .map(|_| &corpus.paired_train[batch_rng.gen_range(0..corpus.paired_train.len())])
                .collect();
            let mut prepared = Vec::with_capacity(n_text_per_batch);
            for _ in 0..n_text_per_batch.min(cfg.train.batch_size) {
                let (sentence, paired_idx) =
                    &ctx.text_pool[batch_rng.gen_range(0..ctx.text_pool.len())];
                prepared.push(ctx.prepare_text(cfg, corpus, sentence, *paired_idx, &mut inject_rng)?);
            }
            let paired_items: Vec<SpeechItem<'_>> = paired_refs
                .iter()
                .map(|ex| SpeechItem { features: &ex.features, targets: &ex.y })
                .collect();
            let text_items: Vec<TextItem<'_>> = prepared
                .iter()
                .map(|p| TextItem { inputs: &p.inputs, targets: &p.targets })
                .collect();

            let mut g = Graph::new();
            let (node, report) = joint_mwer_loss(
                &mut g,
                &store,
                &ctx.model,
                &paired_items,
                &text_items,
                &cfg.weights,
                &beam,
                cfg.decode.nbest,
                &corpus.wp_vocab,
            )?;
            if !report.total.is_finite() {
                aborted = Some(format!("non-finite loss at fine-tuning step {step}"));
                break 'mwer;
            }
            g.backward(node)?;
            let grads = collect_grads(&g);
            let stats = store.sgd_step(&grads, cfg.train.mwer_lr, 5.0)?;
            log_line(&mut log, "mwer", step, &report, stats.grad_norm)?;
            if step % cfg.train.checkpoint_interval == 0 {
                save_checkpoint(&store, &out_dir.join(format!("mwer_step{step}.ckpt")))?;
            }
        }
        save_checkpoint(&store, &mwer_path)?;
        mwer_checkpoint = Some(mwer_path);
    }

    Ok(TrainOutcome {
        steps_run,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        mwer_checkpoint,
        log_path,
        aborted,
    })
}

/// Replay a training log: parse the per-step components and recompose the
/// total under the given weights, returning the worst absolute deviation.
pub fn replay_log(log_text: &str, weights: &LossWeights) -> Result<f64> {
    let mut worst = 0.0f64;
    for line in log_text.lines() {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for kv in line.split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                fields.insert(k, v);
            }
        }
        let get = |k: &str| -> Result<f64> {
            fields
                .get(k)
                .with_context(|| format!("log line missing {k}: {line}"))?
                .parse::<f64>()
                .with_context(|| format!("bad {k} in {line}"))
        };
        let report = BatchLossReport {
            ce_causal_paired: get("l_c_s")?,
            ce_noncausal_paired: get("l_nc_s")?,
            ce_causal_text: get("l_c_t")?,
            ce_noncausal_text: get("l_nc_t")?,
            mwer: if fields.contains_key("m_c_s") {
                Some(crate::loss::MwerComponents {
                    causal_paired: get("m_c_s")?,
                    noncausal_paired: get("m_nc_s")?,
                    causal_text: get("m_c_t")?,
                    noncausal_text: get("m_nc_t")?,
                    skipped: fields.get("skipped").unwrap_or(&"0").parse()?,
                })
            } else {
                None
            },
            total: get("total")?,
        };
        worst = worst.max((report.recompose(weights) - report.total).abs());
    }
    Ok(worst)
}
