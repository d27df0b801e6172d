//! Duration modeling: turning a unit sequence into a frame-rate-like stream
//! by repeating each unit.

use std::collections::BTreeMap;

use rand::Rng;

use super::tokenize::tokenize_word_pieces;
use super::vocab::{UnitKind, Vocab};
use super::TextError;

/// The four up-sampling policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DurationScheme {
    FixedRep,
    RandomRep,
    SubwordDist,
    AlignPlusDist,
}

impl DurationScheme {
    pub fn parse(s: &str) -> Option<DurationScheme> {
        match s {
            "fixed_rep" => Some(DurationScheme::FixedRep),
            "random_rep" => Some(DurationScheme::RandomRep),
            "subword_dist" => Some(DurationScheme::SubwordDist),
            "align_plus_dist" => Some(DurationScheme::AlignPlusDist),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DurationScheme::FixedRep => "fixed_rep",
            DurationScheme::RandomRep => "random_rep",
            DurationScheme::SubwordDist => "subword_dist",
            DurationScheme::AlignPlusDist => "align_plus_dist",
        }
    }
}

/// Per-unit frame-count statistics with a fallback for unseen units.
#[derive(Debug, Clone, Default)]
pub struct DurationStats {
    stats: BTreeMap<u32, (f64, f64)>,
    fallback: (f64, f64),
}

impl DurationStats {
    pub fn new(stats: BTreeMap<u32, (f64, f64)>, fallback: (f64, f64)) -> DurationStats {
        DurationStats { stats, fallback }
    }

    /// (mean, std) for a unit, falling back to the corpus-wide statistics.
    pub fn get(&self, unit: u32) -> (f64, f64) {
        self.stats.get(&unit).copied().unwrap_or(self.fallback)
    }

    pub fn contains(&self, unit: u32) -> bool {
        self.stats.contains_key(&unit)
    }

    pub fn fallback(&self) -> (f64, f64) {
        self.fallback
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, (f64, f64))> + '_ {
        self.stats.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

/// One up-sampling policy plus its learned statistics table.
#[derive(Debug, Clone)]
pub struct DurationModel {
    pub scheme: DurationScheme,
    pub fixed_len: usize,
    pub random_range: (usize, usize),
    pub stats: DurationStats,
    pub min_len: usize,
}

impl DurationModel {
    pub fn new(scheme: DurationScheme) -> DurationModel {
        DurationModel {
            scheme,
            fixed_len: 3,
            random_range: (1, 3),
            stats: DurationStats::default(),
            min_len: 1,
        }
    }

    pub fn with_fixed_len(mut self, len: usize) -> DurationModel {
        self.fixed_len = len;
        self
    }

    pub fn with_stats(mut self, stats: DurationStats) -> DurationModel {
        self.stats = stats;
        self
    }
}

/// A ground-truth alignment: word spans plus per-phoneme spans, in frames.
/// Spans are ordered, non-overlapping and tile `[0, total_frames)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTranscript {
    pub words: Vec<WordSpan>,
    pub phones: Vec<PhoneSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordSpan {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneSpan {
    pub phone: u32,
    pub start: usize,
    pub end: usize,
}

impl AlignedTranscript {
    pub fn total_frames(&self) -> usize {
        self.words.last().map(|w| w.end).unwrap_or(0)
    }

    pub fn transcript(&self) -> String {
        self.words.iter().map(|w| w.word.as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Split `total` frames evenly among `k` pieces, remainder to the leftmost.
pub fn even_split(total: usize, k: usize) -> Vec<usize> {
    assert!(k > 0, "even_split over zero pieces");
    let base = total / k;
    let rem = total % k;
    (0..k).map(|i| base + usize::from(i < rem)).collect()
}

/// True frame count per unit of the aligned transcript: phoneme spans
/// directly, or word frames split evenly among the word's pieces.
pub fn unit_frame_counts(
    alignment: &AlignedTranscript,
    unit_kind: UnitKind,
    wp_vocab: &Vocab,
) -> Result<Vec<usize>, TextError> {
    match unit_kind {
        UnitKind::Phoneme => Ok(alignment.phones.iter().map(|p| p.end - p.start).collect()),
        UnitKind::WordPiece => {
            let mut counts = Vec::new();
            for w in &alignment.words {
                let pieces = tokenize_word_pieces(&w.word, wp_vocab)?;
                counts.extend(even_split(w.end - w.start, pieces.len()));
            }
            Ok(counts)
        }
    }
}

/// Accumulate per-unit (mean, population std) frame counts over a corpus of
/// alignments. Unseen units fall back to the corpus-wide statistics.
pub fn estimate_duration_stats(
    corpus: &[AlignedTranscript],
    unit_kind: UnitKind,
    wp_vocab: &Vocab,
) -> Result<DurationStats, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for alignment in corpus {
        match unit_kind {
            UnitKind::Phoneme => {
                for p in &alignment.phones {
                    let d = (p.end - p.start) as f64;
                    acc.entry(p.phone).or_default().push(d);
                    all.push(d);
                }
            }
            UnitKind::WordPiece => {
                for w in &alignment.words {
                    let pieces = tokenize_word_pieces(&w.word, wp_vocab)?;
                    for (piece, frames) in
                        pieces.iter().zip(even_split(w.end - w.start, pieces.len()))
                    {
                        acc.entry(*piece).or_default().push(frames as f64);
                        all.push(frames as f64);
                    }
                }
            }
        }
    }
    let mean_std = |vals: &[f64]| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let stats = acc.iter().map(|(&u, vals)| (u, mean_std(vals))).collect();
    Ok(DurationStats::new(stats, mean_std(&all)))
}

/// One standard-normal draw (Box-Muller over the supplied stream).
pub fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Gaussian frame count rounded to the nearest integer, clamped at `min_len`.
pub fn sample_duration<R: Rng>(mean: f64, std: f64, min_len: usize, rng: &mut R) -> usize {
    let raw = mean + std * sample_standard_normal(rng);
    (raw.round() as i64).max(min_len as i64) as usize
}

/// Repeat each unit of `x_t` according to the duration model, preserving
/// order. `align_plus_dist` uses true frame counts when an alignment is
/// present and falls back to the sub-word distribution otherwise.
pub fn upsample<R: Rng>(
    x_t: &[u32],
    model: &DurationModel,
    alignment: Option<&AlignedTranscript>,
    wp_vocab: &Vocab,
    unit_kind: UnitKind,
    rng: &mut R,
) -> Result<Vec<u32>, TextError> {
    if x_t.is_empty() {
        return Err(TextError::EmptyText);
    }
    let repeats: Vec<usize> = match (model.scheme, alignment) {
        (DurationScheme::FixedRep, _) => vec![model.fixed_len.max(model.min_len); x_t.len()],
        (DurationScheme::RandomRep, _) => {
            let (lo, hi) = model.random_range;
            x_t.iter().map(|_| rng.gen_range(lo..=hi).max(model.min_len)).collect()
        }
        (DurationScheme::AlignPlusDist, Some(alignment)) => {
            let counts = unit_frame_counts(alignment, unit_kind, wp_vocab)?;
            if counts.len() != x_t.len() {
                return Err(TextError::AlignmentMismatch {
                    units: x_t.len(),
                    aligned: counts.len(),
                });
            }
            counts.iter().map(|&c| c.max(model.min_len)).collect()
        }
        (DurationScheme::SubwordDist, _) | (DurationScheme::AlignPlusDist, None) => x_t
            .iter()
            .map(|&u| {
                let (mean, std) = model.stats.get(u);
                sample_duration(mean, std, model.min_len, rng)
            })
            .collect(),
    };
    let mut out = Vec::with_capacity(repeats.iter().sum());
    for (&unit, &r) in x_t.iter().zip(&repeats) {
        out.extend(std::iter::repeat(unit).take(r));
    }
    Ok(out)
}
