//! The `duet` command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crate::autodiff::{finite_diff_check, load_checkpoint, CheckMode, Graph, LossEval, ParamStore};
use crate::decode::BeamConfig;
use crate::loss::{joint_ce_loss, SpeechItem, TextItem};
use crate::synth::{generate_corpus, load_corpus, write_corpus, Corpus};
use crate::text::estimate_duration_stats;

use super::config::ExperimentConfig;
use super::evaluate::{evaluate, latency_report, verify_checkpoint_shape};
use super::train::{stream_rng, train, TrainContext};

#[derive(Parser)]
#[command(
    name = "duet",
    about = "Joint speech-and-text training for a streaming transducer, at desk scale",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into a directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump the per-unit duration statistics estimated from the paired set.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run CE training and the optional expected-error fine-tuning phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to continue from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute WER tables for a checkpoint.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// One of `head`, `rare` (default: both).
        #[arg(long)]
        test_set: Option<String>,
        /// Also write line-delimited records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Streaming latency metrics for a checkpoint.
    Latency {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of `head`, `rare` (default: head).
        #[arg(long)]
        test_set: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// SGD steps to run before checking.
        #[arg(long, default_value_t = 0)]
        steps: usize,
        /// Entries sampled per parameter; 0 checks every entry.
        #[arg(long, default_value_t = 2)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_data(cfg: &ExperimentConfig) -> Result<Corpus> {
    load_corpus(&cfg.data_dir, cfg.raw_frame_ms())
        .with_context(|| format!("loading the corpus from {}", cfg.data_dir.display()))
}

fn test_split<'a>(corpus: &'a Corpus, name: &str) -> Result<&'a [crate::synth::PairedExample]> {
    match name {
        "head" => Ok(&corpus.head_test),
        "rare" => Ok(&corpus.rare_test),
        other => bail!("unknown test set {other:?}; expected head or rare"),
    }
}

fn emit(out: &Option<PathBuf>, records: &str) -> Result<()> {
    if let Some(path) = out {
        fs::write(path, records).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Entry point shared by the binary and the CLI tests.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.gen.seed = s;
            }
            cfg.gen.frame_ms = cfg.raw_frame_ms();
            let generated = generate_corpus(&cfg.gen)?;
            write_corpus(&generated.corpus, &out)?;
            println!(
                "wrote {} paired, {} text, {}+{} test utterances to {}",
                generated.corpus.paired_train.len(),
                generated.corpus.unpaired_text.len(),
                generated.corpus.head_test.len(),
                generated.corpus.rare_test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Stats { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let corpus = load_data(&cfg)?;
            let alignments: Vec<_> =
                corpus.paired_train.iter().map(|e| e.alignment.clone()).collect();
            let stats =
                estimate_duration_stats(&alignments, cfg.text.unit_kind, &corpus.wp_vocab)?;
            let vocab = match cfg.text.unit_kind {
                crate::text::UnitKind::Phoneme => &corpus.phone_vocab,
                crate::text::UnitKind::WordPiece => &corpus.wp_vocab,
            };
            let mut text = String::from("unit\tsymbol\tmean_frames\tstd_frames\n");
            for (unit, (mean, std)) in stats.iter() {
                text.push_str(&format!("{unit}\t{}\t{mean:.4}\t{std:.4}\n", vocab.unit(unit)));
            }
            let (fm, fs) = stats.fallback();
            text.push_str(&format!("fallback\t-\t{fm:.4}\t{fs:.4}\n"));
            print!("{text}");
            emit(&out, &text)?;
            Ok(())
        }
        Command::Train { config, out, seed, checkpoint } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let corpus = load_data(&cfg)?;
            let outcome = train(&cfg, &corpus, &out, checkpoint.as_deref())?;
            if let Some(reason) = outcome.aborted {
                bail!(
                    "training aborted ({reason}); last good checkpoint: {}",
                    outcome.best_checkpoint.display()
                );
            }
            println!(
                "trained {} CE steps; final {}, best {}{}",
                outcome.steps_run,
                outcome.final_checkpoint.display(),
                outcome.best_checkpoint.display(),
                match outcome.mwer_checkpoint {
                    Some(p) => format!(", fine-tuned {}", p.display()),
                    None => String::new(),
                }
            );
            Ok(())
        }
        Command::Evaluate { config, checkpoint, beam, test_set, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(b) = beam {
                cfg.decode.beam_size = b;
            }
            let corpus = load_data(&cfg)?;
            let ctx = TrainContext::new(&cfg, &corpus)?;
            let store = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            verify_checkpoint_shape(&store, &ctx.model)?;
            let beam_cfg = BeamConfig {
                beam_size: cfg.decode.beam_size,
                max_symbols_per_frame: cfg.decode.max_symbols,
            };
            let names: Vec<&str> = match &test_set {
                Some(name) => vec![name.as_str()],
                None => vec!["head", "rare"],
            };
            let mut sets = Vec::new();
            for name in &names {
                sets.push((*name, test_split(&corpus, name)?));
            }
            let table = evaluate(
                &store,
                &ctx.model,
                &sets,
                &beam_cfg,
                &corpus.wp_vocab,
                &checkpoint.display().to_string(),
                &cfg.hash(),
            )?;
            print!("{}", table.to_text());
            emit(&out, &table.to_records())?;
            Ok(())
        }
        Command::Latency { config, checkpoint, test_set, beam, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(b) = beam {
                cfg.decode.beam_size = b;
            }
            let corpus = load_data(&cfg)?;
            let ctx = TrainContext::new(&cfg, &corpus)?;
            let store = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            verify_checkpoint_shape(&store, &ctx.model)?;
            let beam_cfg = BeamConfig {
                beam_size: cfg.decode.beam_size,
                max_symbols_per_frame: cfg.decode.max_symbols,
            };
            let split = test_split(&corpus, test_set.as_deref().unwrap_or("head"))?;
            let report = latency_report(&store, &ctx.model, split, &beam_cfg, &corpus.wp_vocab)?;
            print!("{}", report.to_text_block());
            emit(&out, &report.to_records())?;
            Ok(())
        }
        Command::Gradcheck { config, steps, samples, seed } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let corpus = load_data(&cfg)?;
            let report = gradcheck(&cfg, &corpus, steps, samples)?;
            print!("{}", report.to_lines());
            if !report.passed() {
                bail!("gradient check failed (worst {:.3e})", report.max_rel_err());
            }
            Ok(())
        }
    }
}

/// Finite-difference check of the full joint CE loss on a small fixed batch,
/// optionally after a few SGD steps.
pub fn gradcheck(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    steps: usize,
    samples: usize,
) -> Result<crate::autodiff::GradCheckReport> {
    let ctx = TrainContext::new(cfg, corpus)?;
    let mut store = crate::model::init_params(&ctx.model, cfg.train.seed)?;

    // fixed 2-utterance + 2-text-example batch, injected once
    let mut inject_rng = stream_rng(cfg.train.seed, 21);
    let paired: Vec<&crate::synth::PairedExample> =
        corpus.paired_train.iter().take(2).collect();
    let mut prepared = Vec::new();
    for sentence in corpus.unpaired_text.iter().take(2) {
        prepared.push(ctx.prepare_text(cfg, corpus, sentence, None, &mut inject_rng)?);
    }

    let eval = |store: &ParamStore, want_grads: bool| -> std::result::Result<LossEval, String> {
        let paired_items: Vec<SpeechItem<'_>> = paired
            .iter()
            .map(|ex| SpeechItem { features: &ex.features, targets: &ex.y })
            .collect();
        let text_items: Vec<TextItem<'_>> =
            prepared.iter().map(|p| TextItem { inputs: &p.inputs, targets: &p.targets }).collect();
        let mut g = Graph::new();
        let (node, report) =
            joint_ce_loss(&mut g, store, &ctx.model, &paired_items, &text_items, &cfg.weights)
                .map_err(|e| e.to_string())?;
        let mut grads = BTreeMap::new();
        if want_grads {
            g.backward(node).map_err(|e| e.to_string())?;
            for (n, grad) in g.param_grads() {
                grads.insert(n.to_string(), grad.clone());
            }
        }
        Ok(LossEval { value: report.total, grads })
    };

    for _ in 0..steps {
        let base = eval(&store, true).map_err(anyhow::Error::msg)?;
        store.sgd_step(&base.grads, cfg.train.lr, 5.0)?;
    }

    let mode = if samples == 0 {
        CheckMode::Exhaustive
    } else {
        CheckMode::Sampled { per_param: samples, seed: cfg.train.seed ^ 0x9e3779b9 }
    };
    Ok(finite_diff_check(eval, &mut store, 1e-5, 1e-4, mode)?)
}

/// Run the CLI against a checkpoint-verifying closure; used by `main`.
pub fn main_entry() -> i32 {
    let args: Vec<std::ffi::OsString> = std::env::args_os().collect();
    match run(args) {
        Ok(()) => 0,
        Err(e) => {
            // clap errors carry their own exit semantics (--help is success)
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let code = if clap_err.use_stderr() { 2 } else { 0 };
                let _ = clap_err.print();
                return code;
            }
            eprintln!("error: {e:#}");
            1
        }
    }
}
