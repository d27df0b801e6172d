//! Flat key-value experiment configuration.
//!
//! One `key = value` pair per line, `#` comments. Every field has a default;
//! unknown keys are errors so ablation typos cannot pass silently.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::synth::GeneratorConfig;
use crate::text::{DurationScheme, UnitKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}: {reason}")]
    BadValue { line: usize, key: String, value: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct TextInjectionConfig {
    pub unit_kind: UnitKind,
    pub scheme: DurationScheme,
    pub fixed_len: usize,
    pub mask_rate: f64,
    pub mask_span: usize,
}

impl Default for TextInjectionConfig {
    fn default() -> Self {
        TextInjectionConfig {
            unit_kind: UnitKind::Phoneme,
            scheme: DurationScheme::SubwordDist,
            fixed_len: 3,
            mask_rate: 0.15,
            mask_span: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Fraction of each minibatch drawn from the text stream.
    pub text_fraction: f64,
    pub ce_steps: usize,
    pub mwer_steps: usize,
    pub lr: f64,
    pub mwer_lr: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            text_fraction: 0.5,
            ce_steps: 1500,
            mwer_steps: 0,
            lr: 0.5,
            mwer_lr: 0.02,
            seed: 1,
            checkpoint_interval: 250,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_symbols: usize,
    pub nbest: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 8, max_symbols: 4, nbest: 8 }
    }
}

/// The complete experiment description; `(config, seed)` determines corpora,
/// training logs, checkpoints and reports.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub gen: GeneratorConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub text: TextInjectionConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gen: GeneratorConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            text: TextInjectionConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            data_dir: PathBuf::from("data"),
        }
    }
}

macro_rules! parse_as {
    ($key:expr, $value:expr, $line:expr, $ty:ty) => {
        $value.parse::<$ty>().map_err(|e| ConfigError::BadValue {
            line: $line,
            key: $key.to_string(),
            value: $value.to_string(),
            reason: e.to_string(),
        })?
    };
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine { line, text: raw.to_string() })?;
            cfg.set(key.trim(), value.trim(), line)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        match key {
            "gen.phonemes" => self.gen.phoneme_count = parse_as!(key, value, line, usize),
            "gen.feature_dim" => self.gen.feature_dim = parse_as!(key, value, line, usize),
            "gen.lexicon_size" => self.gen.lexicon_size = parse_as!(key, value, line, usize),
            "gen.rare_words" => self.gen.rare_words = parse_as!(key, value, line, usize),
            "gen.head_syllables" => self.gen.head_syllables = parse_as!(key, value, line, usize),
            "gen.rare_syllables" => self.gen.rare_syllables = parse_as!(key, value, line, usize),
            "gen.bigram_vocab" => self.gen.bigram_vocab = parse_as!(key, value, line, usize),
            "gen.duration_mean" => self.gen.duration_mean = parse_as!(key, value, line, f64),
            "gen.duration_std" => self.gen.duration_std = parse_as!(key, value, line, f64),
            "gen.noise_std" => self.gen.noise_std = parse_as!(key, value, line, f64),
            "gen.utterance_words_min" => {
                self.gen.utterance_words.0 = parse_as!(key, value, line, usize)
            }
            "gen.utterance_words_max" => {
                self.gen.utterance_words.1 = parse_as!(key, value, line, usize)
            }
            "gen.paired_size" => self.gen.paired_size = parse_as!(key, value, line, usize),
            "gen.unpaired_size" => self.gen.unpaired_size = parse_as!(key, value, line, usize),
            "gen.head_test_size" => self.gen.head_test_size = parse_as!(key, value, line, usize),
            "gen.rare_test_size" => self.gen.rare_test_size = parse_as!(key, value, line, usize),
            "gen.rare_paired_cap" => self.gen.rare_paired_cap = parse_as!(key, value, line, usize),
            "gen.rare_text_prob" => self.gen.rare_text_prob = parse_as!(key, value, line, f64),
            "gen.seed" => self.gen.seed = parse_as!(key, value, line, u64),

            "model.model_dim" => self.model.model_dim = parse_as!(key, value, line, usize),
            "model.causal_layers" => self.model.causal_layers = parse_as!(key, value, line, usize),
            "model.cascaded_layers" => {
                self.model.cascaded_layers = parse_as!(key, value, line, usize)
            }
            "model.left_context" => self.model.left_context = parse_as!(key, value, line, usize),
            "model.right_context" => self.model.right_context = parse_as!(key, value, line, usize),
            "model.subsample" => self.model.subsample = parse_as!(key, value, line, usize),
            "model.ffn_dim" => self.model.ffn_dim = parse_as!(key, value, line, usize),
            "model.pred_embed_dim" => {
                self.model.pred_embed_dim = parse_as!(key, value, line, usize)
            }
            "model.pred_dim" => self.model.pred_dim = parse_as!(key, value, line, usize),
            "model.joint_dim" => self.model.joint_dim = parse_as!(key, value, line, usize),
            "model.frame_ms" => self.model.frame_ms = parse_as!(key, value, line, f64),
            "model.max_target_len" => {
                self.model.max_target_len = parse_as!(key, value, line, usize)
            }

            "weights.lambda1" => self.weights.lambda1 = parse_as!(key, value, line, f64),
            "weights.lambda2" => self.weights.lambda2 = parse_as!(key, value, line, f64),
            "weights.alpha" => self.weights.alpha = parse_as!(key, value, line, f64),
            "weights.fastemit" => self.weights.fastemit = parse_as!(key, value, line, f64),

            "text.unit_kind" => {
                self.text.unit_kind =
                    UnitKind::parse(value).ok_or_else(|| ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        value: value.to_string(),
                        reason: "expected phoneme or word_piece".into(),
                    })?
            }
            "text.scheme" => {
                self.text.scheme =
                    DurationScheme::parse(value).ok_or_else(|| ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        value: value.to_string(),
                        reason: "expected fixed_rep, random_rep, subword_dist or align_plus_dist"
                            .into(),
                    })?
            }
            "text.fixed_len" => self.text.fixed_len = parse_as!(key, value, line, usize),
            "text.mask_rate" => self.text.mask_rate = parse_as!(key, value, line, f64),
            "text.mask_span" => self.text.mask_span = parse_as!(key, value, line, usize),

            "train.batch_size" => self.train.batch_size = parse_as!(key, value, line, usize),
            "train.text_fraction" => self.train.text_fraction = parse_as!(key, value, line, f64),
            "train.ce_steps" => self.train.ce_steps = parse_as!(key, value, line, usize),
            "train.mwer_steps" => self.train.mwer_steps = parse_as!(key, value, line, usize),
            "train.lr" => self.train.lr = parse_as!(key, value, line, f64),
            "train.mwer_lr" => self.train.mwer_lr = parse_as!(key, value, line, f64),
            "train.seed" => self.train.seed = parse_as!(key, value, line, u64),
            "train.checkpoint_interval" => {
                self.train.checkpoint_interval = parse_as!(key, value, line, usize)
            }

            "decode.beam_size" => self.decode.beam_size = parse_as!(key, value, line, usize),
            "decode.max_symbols" => self.decode.max_symbols = parse_as!(key, value, line, usize),
            "decode.nbest" => self.decode.nbest = parse_as!(key, value, line, usize),

            "data.dir" => self.data_dir = PathBuf::from(value),

            _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
        }
        if !(0.0..=1.0).contains(&self.train.text_fraction) {
            return Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason: "text fraction must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Canonical dump of every field; also the input to the config hash.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let g = &self.gen;
        let _ = write!(
            s,
            "gen.phonemes = {}\ngen.feature_dim = {}\ngen.lexicon_size = {}\ngen.rare_words = {}\n\
             gen.head_syllables = {}\ngen.rare_syllables = {}\ngen.bigram_vocab = {}\n\
             gen.duration_mean = {}\ngen.duration_std = {}\ngen.noise_std = {}\n\
             gen.utterance_words_min = {}\ngen.utterance_words_max = {}\n\
             gen.paired_size = {}\ngen.unpaired_size = {}\ngen.head_test_size = {}\n\
             gen.rare_test_size = {}\ngen.rare_paired_cap = {}\ngen.rare_text_prob = {}\ngen.seed = {}\n",
            g.phoneme_count,
            g.feature_dim,
            g.lexicon_size,
            g.rare_words,
            g.head_syllables,
            g.rare_syllables,
            g.bigram_vocab,
            g.duration_mean,
            g.duration_std,
            g.noise_std,
            g.utterance_words.0,
            g.utterance_words.1,
            g.paired_size,
            g.unpaired_size,
            g.head_test_size,
            g.rare_test_size,
            g.rare_paired_cap,
            g.rare_text_prob,
            g.seed
        );
        let m = &self.model;
        let _ = write!(
            s,
            "model.model_dim = {}\nmodel.causal_layers = {}\nmodel.cascaded_layers = {}\n\
             model.left_context = {}\nmodel.right_context = {}\nmodel.subsample = {}\n\
             model.ffn_dim = {}\nmodel.pred_embed_dim = {}\nmodel.pred_dim = {}\n\
             model.joint_dim = {}\nmodel.frame_ms = {}\nmodel.max_target_len = {}\n",
            m.model_dim,
            m.causal_layers,
            m.cascaded_layers,
            m.left_context,
            m.right_context,
            m.subsample,
            m.ffn_dim,
            m.pred_embed_dim,
            m.pred_dim,
            m.joint_dim,
            m.frame_ms,
            m.max_target_len
        );
        let _ = write!(
            s,
            "weights.lambda1 = {}\nweights.lambda2 = {}\nweights.alpha = {}\nweights.fastemit = {}\n\
             text.unit_kind = {}\ntext.scheme = {}\ntext.fixed_len = {}\ntext.mask_rate = {}\n\
             text.mask_span = {}\ntrain.batch_size = {}\ntrain.text_fraction = {}\n\
             train.ce_steps = {}\ntrain.mwer_steps = {}\ntrain.lr = {}\ntrain.mwer_lr = {}\n\
             train.seed = {}\ntrain.checkpoint_interval = {}\ndecode.beam_size = {}\n\
             decode.max_symbols = {}\ndecode.nbest = {}\ndata.dir = {}\n",
            self.weights.lambda1,
            self.weights.lambda2,
            self.weights.alpha,
            self.weights.fastemit,
            self.text.unit_kind.as_str(),
            self.text.scheme.as_str(),
            self.text.fixed_len,
            self.text.mask_rate,
            self.text.mask_span,
            self.train.batch_size,
            self.train.text_fraction,
            self.train.ce_steps,
            self.train.mwer_steps,
            self.train.lr,
            self.train.mwer_lr,
            self.train.seed,
            self.train.checkpoint_interval,
            self.decode.beam_size,
            self.decode.max_symbols,
            self.decode.nbest,
            self.data_dir.display()
        );
        s
    }

    /// FNV-1a hash of the canonical dump.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Raw feature frame duration implied by the model clock.
    pub fn raw_frame_ms(&self) -> f64 {
        self.model.frame_ms / self.model.subsample as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys_and_rejects_unknown() {
        let cfg = ExperimentConfig::from_str(
            "train.lr = 0.25\n# comment\ntext.scheme = fixed_rep\ndata.dir = /tmp/corpus\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.text.scheme, DurationScheme::FixedRep);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/corpus"));

        let err = ExperimentConfig::from_str("train.typo = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { ref key, .. } if key == "train.typo"));
        let err = ExperimentConfig::from_str("text.scheme = sometimes\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { .. }));
        let err = ExperimentConfig::from_str("just nonsense\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadLine { .. }));
    }

    #[test]
    fn canonical_dump_reparses_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        let reparsed = ExperimentConfig::from_str(&cfg.to_text()).unwrap();
        assert_eq!(cfg.hash(), reparsed.hash());
        let mut other = ExperimentConfig::default();
        other.train.lr = 0.123;
        assert_ne!(cfg.hash(), other.hash());
    }
}
