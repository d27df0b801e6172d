//! Text frontend: tokenization, duration-model up-sampling, and masking.
//!
//! Unpaired text enters the model as a pair of views: an input unit stream
//! `x_t` (phonemes or word-pieces) and word-piece targets `y_t`. The input
//! stream is up-sampled by a [`DurationModel`] so it resembles frame-rate
//! speech, then masked so the mapping stays non-trivial.

mod duration;
mod mask;
mod tokenize;
mod vocab;

use rand::Rng;
use thiserror::Error;

pub use duration::{
    estimate_duration_stats, even_split, sample_duration, sample_standard_normal,
    unit_frame_counts, upsample, AlignedTranscript, DurationModel, DurationScheme, DurationStats,
    PhoneSpan, WordSpan,
};
pub use mask::mask_spans;
pub use tokenize::{
    build_text_example, tokenize_phonemes, tokenize_word_pieces,
    tokenize_word_pieces_no_separator, Lexicon, TextExample,
};
pub use vocab::{UnitKind, Vocab, BLANK_ID, EOS_ID, MASK_ID, PAD_ID, SEPARATOR};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("character {ch:?} at position {pos} is outside the vocabulary alphabet")]
    CharOutsideAlphabet { ch: char, pos: usize },
    #[error("word {0:?} is not in the lexicon")]
    OutOfLexicon(String),
    #[error("duplicate vocabulary unit {0:?}")]
    DuplicateUnit(String),
    #[error("empty text input")]
    EmptyText,
    #[error("empty alignment corpus")]
    EmptyCorpus,
    #[error("mask rate {0} outside (0, 1]")]
    BadMaskRate(f64),
    #[error("alignment provides {aligned} unit durations but the input has {units} units")]
    AlignmentMismatch { units: usize, aligned: usize },
    #[error("malformed lexicon line {0:?}")]
    BadLexiconLine(String),
    #[error("vocabulary file {0} does not start with the special units")]
    BadVocabFile(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Up-sample and mask one text example's input stream, producing the ids the
/// text encoder consumes.
#[allow(clippy::too_many_arguments)]
pub fn inject<R: Rng>(
    x_t: &[u32],
    model: &DurationModel,
    alignment: Option<&AlignedTranscript>,
    wp_vocab: &Vocab,
    unit_kind: UnitKind,
    mask_rate: f64,
    mask_span: usize,
    rng: &mut R,
) -> Result<Vec<u32>, TextError> {
    let up = upsample(x_t, model, alignment, wp_vocab, unit_kind, rng)?;
    let (masked, _) = mask_spans(&up, MASK_ID, mask_rate, mask_span, rng)?;
    Ok(masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn wp_vocab() -> Vocab {
        Vocab::new(
            UnitKind::WordPiece,
            vec![SEPARATOR.into(), "a".into(), "b".into(), "ab".into()],
        )
        .unwrap()
    }

    fn align(words: &[(&str, usize, usize)], phones: &[(u32, usize, usize)]) -> AlignedTranscript {
        AlignedTranscript {
            words: words
                .iter()
                .map(|&(w, s, e)| WordSpan { word: w.into(), start: s, end: e })
                .collect(),
            phones: phones
                .iter()
                .map(|&(p, s, e)| PhoneSpan { phone: p, start: s, end: e })
                .collect(),
        }
    }

    #[test]
    fn stats_mean_and_population_std() {
        // one phoneme observed with frame counts {2, 4, 6}
        let corpus = vec![
            align(&[("a", 0, 2)], &[(4, 0, 2)]),
            align(&[("a", 0, 4)], &[(4, 0, 4)]),
            align(&[("a", 0, 6)], &[(4, 0, 6)]),
        ];
        let stats = estimate_duration_stats(&corpus, UnitKind::Phoneme, &wp_vocab()).unwrap();
        let (mean, std) = stats.get(4);
        assert!((mean - 4.0).abs() < 1e-12);
        assert!((std - 1.632_993_161_855_452_3).abs() < 1e-5, "std {std}");
    }

    #[test]
    fn word_frames_split_evenly_remainder_left() {
        assert_eq!(even_split(7, 2), vec![4, 3]);
        assert_eq!(even_split(6, 3), vec![2, 2, 2]);
        assert_eq!(even_split(2, 3), vec![1, 1, 0]);
        // "ab" then "a" over a 7-frame word: pieces of word "aba" are ab,a
        let corpus = vec![align(&[("aba", 0, 7)], &[])];
        let v = wp_vocab();
        let stats = estimate_duration_stats(&corpus, UnitKind::WordPiece, &v).unwrap();
        assert_eq!(stats.get(v.id("ab").unwrap()).0, 4.0);
        assert_eq!(stats.get(v.id("a").unwrap()).0, 3.0);
    }

    #[test]
    fn single_observation_std_zero_and_fallback() {
        let corpus = vec![align(&[("a", 0, 5)], &[(4, 0, 5)])];
        let stats = estimate_duration_stats(&corpus, UnitKind::Phoneme, &wp_vocab()).unwrap();
        assert_eq!(stats.get(4), (5.0, 0.0));
        // unseen unit falls back to the global statistics
        assert_eq!(stats.get(99), (5.0, 0.0));
        assert!(!stats.contains(99));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            estimate_duration_stats(&[], UnitKind::Phoneme, &wp_vocab()),
            Err(TextError::EmptyCorpus)
        ));
    }

    #[test]
    fn self_alignments_reproduce_constant_durations() {
        // constant duration 4 per phoneme -> mean 4, std 0
        let corpus: Vec<AlignedTranscript> = (0..20)
            .map(|_| align(&[("a", 0, 8)], &[(4, 0, 4), (5, 4, 8)]))
            .collect();
        let stats = estimate_duration_stats(&corpus, UnitKind::Phoneme, &wp_vocab()).unwrap();
        assert_eq!(stats.get(4), (4.0, 0.0));
        assert_eq!(stats.get(5), (4.0, 0.0));
    }

    #[test]
    fn fixed_rep_repeats_three_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DurationModel::new(DurationScheme::FixedRep);
        let out = upsample(&[7, 3], &model, None, &wp_vocab(), UnitKind::Phoneme, &mut rng).unwrap();
        assert_eq!(out, vec![7, 7, 7, 3, 3, 3]);
    }

    #[test]
    fn random_rep_monte_carlo_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DurationModel::new(DurationScheme::RandomRep);
        let v = wp_vocab();
        let mut total = 0usize;
        let n = 100_000;
        let x = [9u32];
        for _ in 0..n {
            let out = upsample(&x, &model, None, &v, UnitKind::Phoneme, &mut rng).unwrap();
            assert!((1..=3).contains(&out.len()));
            total += out.len();
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean run length {mean}");
    }

    #[test]
    fn subword_dist_degenerate_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut table = std::collections::BTreeMap::new();
        table.insert(6u32, (4.0, 0.0));
        let model = DurationModel::new(DurationScheme::SubwordDist)
            .with_stats(DurationStats::new(table, (2.0, 0.0)));
        let out = upsample(&[6], &model, None, &wp_vocab(), UnitKind::Phoneme, &mut rng).unwrap();
        assert_eq!(out, vec![6; 4]);
    }

    #[test]
    fn align_plus_dist_uses_true_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = DurationModel::new(DurationScheme::AlignPlusDist);
        let a = align(&[("x", 0, 9)], &[(4, 0, 2), (5, 2, 9)]);
        let out =
            upsample(&[4, 5], &model, Some(&a), &wp_vocab(), UnitKind::Phoneme, &mut rng).unwrap();
        assert_eq!(out.len(), 9);
        assert_eq!(&out[..2], &[4, 4]);
        assert_eq!(&out[2..], &[5; 7]);
        // mismatched alignment is rejected
        assert!(matches!(
            upsample(&[4], &model, Some(&a), &wp_vocab(), UnitKind::Phoneme, &mut rng),
            Err(TextError::AlignmentMismatch { .. })
        ));
    }

    #[test]
    fn empty_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = DurationModel::new(DurationScheme::FixedRep);
        assert!(matches!(
            upsample(&[], &model, None, &wp_vocab(), UnitKind::Phoneme, &mut rng),
            Err(TextError::EmptyText)
        ));
    }

    #[test]
    fn upsample_preserves_order_for_every_scheme() {
        let v = wp_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<u32> = vec![4, 5, 4, 6, 7, 5];
        let mut table = std::collections::BTreeMap::new();
        for &u in &x {
            table.insert(u, (3.0, 1.0));
        }
        let stats = DurationStats::new(table, (3.0, 1.0));
        for scheme in [
            DurationScheme::FixedRep,
            DurationScheme::RandomRep,
            DurationScheme::SubwordDist,
            DurationScheme::AlignPlusDist, // no alignment -> falls back
        ] {
            let model = DurationModel::new(scheme).with_stats(stats.clone());
            for _ in 0..50 {
                let out = upsample(&x, &model, None, &v, UnitKind::Phoneme, &mut rng).unwrap();
                let mut dedup = Vec::new();
                for &u in &out {
                    if dedup.last() != Some(&u) {
                        dedup.push(u);
                    }
                }
                // x has no adjacent repeats, so run-length collapse recovers it
                assert_eq!(dedup, x, "scheme {:?}", scheme);
                match scheme {
                    DurationScheme::FixedRep => assert_eq!(out.len(), 3 * x.len()),
                    DurationScheme::RandomRep => {
                        assert!(out.len() >= x.len() && out.len() <= 3 * x.len())
                    }
                    _ => assert!(out.len() >= x.len()),
                }
            }
        }
    }

    #[test]
    fn masking_reaches_rate_and_overshoots_modestly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ids = vec![7u32; 100];
        let trials = 10_000;
        let mut total_frac = 0.0;
        for _ in 0..trials {
            let (masked, flags) = mask_spans(&ids, MASK_ID, 0.15, 5, &mut rng).unwrap();
            let count = flags.iter().filter(|&&f| f).count();
            assert!(count >= 15, "masked {count} < 15");
            assert_eq!(masked.iter().filter(|&&id| id == MASK_ID).count(), count);
            total_frac += count as f64 / 100.0;
        }
        let mean = total_frac / trials as f64;
        assert!((0.15..=0.19).contains(&mean), "mean masked fraction {mean}");
    }

    #[test]
    fn short_sequence_fully_masked_by_clipped_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (masked, flags) = mask_spans(&[4, 5, 6], MASK_ID, 0.15, 5, &mut rng).unwrap();
        assert_eq!(masked, vec![MASK_ID; 3]);
        assert!(flags.iter().all(|&f| f));
    }

    #[test]
    fn rate_one_saturates_and_bad_rates_reject() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (masked, _) = mask_spans(&[4, 5, 6, 7], MASK_ID, 1.0, 2, &mut rng).unwrap();
        assert!(masked.iter().all(|&id| id == MASK_ID));
        assert!(matches!(
            mask_spans(&[4], MASK_ID, 0.0, 2, &mut rng),
            Err(TextError::BadMaskRate(_))
        ));
        assert!(matches!(
            mask_spans(&[4], MASK_ID, 1.5, 2, &mut rng),
            Err(TextError::BadMaskRate(_))
        ));
    }

    #[test]
    fn unmasked_positions_unchanged_and_flags_cover_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ids: Vec<u32> = (0..40).map(|i| 4 + (i % 5)).collect();
        for _ in 0..200 {
            let (masked, flags) = mask_spans(&ids, MASK_ID, 0.15, 5, &mut rng).unwrap();
            for i in 0..ids.len() {
                if flags[i] {
                    assert_eq!(masked[i], MASK_ID);
                } else {
                    assert_eq!(masked[i], ids[i]);
                }
            }
            let frac = flags.iter().filter(|&&f| f).count() as f64 / ids.len() as f64;
            assert!(frac >= 0.15);
        }
    }
}
