//! Synthetic corpus generation.
//!
//! Utterances are word sequences over a small lexicon. Each word is a
//! concatenation of two-letter syllables; letters map one-to-one to phonemes,
//! and each phoneme has a feature-space prototype vector. Speech features are
//! prototype frames plus Gaussian noise, with per-phoneme frame counts drawn
//! from a rounded Gaussian, so ground-truth alignments come for free.
//!
//! The head/rare split plants the long-tail structure: rare words are built
//! from syllables no head word uses, occur fewer than the configured cap of
//! times in paired training data, and are abundant in the unpaired text.

mod files;
mod generate;

pub use files::{load_corpus, load_examples, write_corpus};
pub use generate::{
    generate_corpus, nearest_prototype_accuracy, synthesize_utterance, Corpus, GeneratedCorpus,
    GeneratorTables,
};

use thiserror::Error;

use crate::autodiff::Array;
use crate::text::AlignedTranscript;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("word {0:?} is not in the lexicon")]
    OutOfLexicon(String),
    #[error("text frontend failure: {0}")]
    Text(#[from] crate::text::TextError),
    #[error("could not sample a fresh test utterance after {0} attempts")]
    TestSetExhausted(usize),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed corpus file {path}: {reason}")]
    BadCorpusFile { path: String, reason: String },
}

/// Knobs of the corpus generator.
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub phoneme_count: usize,
    pub feature_dim: usize,
    pub lexicon_size: usize,
    pub rare_words: usize,
    pub head_syllables: usize,
    pub rare_syllables: usize,
    /// How many bigram pieces the word-piece vocabulary keeps.
    pub bigram_vocab: usize,
    pub duration_mean: f64,
    pub duration_std: f64,
    pub noise_std: f64,
    pub utterance_words: (usize, usize),
    pub paired_size: usize,
    pub unpaired_size: usize,
    pub head_test_size: usize,
    pub rare_test_size: usize,
    /// Rare words must occur strictly fewer than this many times in the
    /// paired set; zero keeps them out entirely.
    pub rare_paired_cap: usize,
    /// Probability that an unpaired-text word slot draws a rare word.
    pub rare_text_prob: f64,
    /// Duration of one raw feature frame.
    pub frame_ms: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            phoneme_count: 12,
            feature_dim: 8,
            lexicon_size: 60,
            rare_words: 15,
            head_syllables: 22,
            rare_syllables: 8,
            bigram_vocab: 30,
            duration_mean: 6.0,
            duration_std: 2.0,
            noise_std: 0.5,
            utterance_words: (2, 4),
            paired_size: 4000,
            unpaired_size: 40_000,
            head_test_size: 150,
            rare_test_size: 150,
            rare_paired_cap: 5,
            rare_text_prob: 0.4,
            frame_ms: 15.0,
            seed: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |msg: String| Err(GenError::BadConfig(msg));
        if self.phoneme_count == 0
            || self.feature_dim == 0
            || self.lexicon_size == 0
            || self.paired_size == 0
            || self.unpaired_size == 0
        {
            return bad("all sizes must be at least 1".into());
        }
        if self.phoneme_count > 2 * self.feature_dim {
            return bad(format!(
                "phoneme_count {} exceeds 2 * feature_dim {}; prototypes would collide",
                self.phoneme_count, self.feature_dim
            ));
        }
        if self.rare_words >= self.lexicon_size {
            return bad(format!(
                "rare_words {} must leave room for head words in a lexicon of {}",
                self.rare_words, self.lexicon_size
            ));
        }
        if self.rare_test_size > 0 && self.rare_words == 0 {
            return bad("rare test utterances requested but the lexicon has no rare words".into());
        }
        if self.rare_words > 0 && self.rare_syllables < 2 {
            return bad("rare words need at least 2 rare syllables to draw from".into());
        }
        let pairs = self.phoneme_count * self.phoneme_count;
        if self.head_syllables + self.rare_syllables > pairs {
            return bad(format!(
                "syllable inventory {} exceeds the {} distinct letter pairs",
                self.head_syllables + self.rare_syllables,
                pairs
            ));
        }
        if self.utterance_words.0 == 0 || self.utterance_words.0 > self.utterance_words.1 {
            return bad(format!("bad utterance word range {:?}", self.utterance_words));
        }
        if !(0.0..=1.0).contains(&self.rare_text_prob) {
            return bad(format!("rare_text_prob {} outside [0,1]", self.rare_text_prob));
        }
        Ok(())
    }
}

/// One paired speech-text example with ground truth.
#[derive(Debug, Clone)]
pub struct PairedExample {
    pub id: String,
    /// `T x feature_dim` speech features.
    pub features: Array,
    pub transcript: String,
    /// Word-piece targets including the trailing EOS.
    pub y: Vec<u32>,
    pub alignment: AlignedTranscript,
    pub utt_end_ms: f64,
}
