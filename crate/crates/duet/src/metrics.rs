//! Word error rate and streaming quality metrics.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("corpus WER needs at least one non-empty reference")]
    EmptyReferences,
    #[error("percentile of an empty value list")]
    EmptyPercentile,
    #[error("percentile {0} outside 1..=100")]
    BadPercentile(u8),
    #[error("latency report needs at least one utterance")]
    EmptyReport,
}

/// Minimal-cost alignment counts between a hypothesis and a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub total: usize,
}

/// Levenshtein alignment with unit costs. Ties prefer substitution, then
/// deletion, then insertion, which keeps the split deterministic.
pub fn edit_distance<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> EditCounts {
    let h = hyp.len();
    let r = reference.len();
    // dp[i][j]: cost of aligning hyp[..i] with ref[..j]
    let mut dp = vec![vec![0usize; r + 1]; h + 1];
    for i in 0..=h {
        dp[i][0] = i;
    }
    for j in 0..=r {
        dp[0][j] = j;
    }
    for i in 1..=h {
        for j in 1..=r {
            let sub_cost = if hyp[i - 1].as_ref() == reference[j - 1].as_ref() { 0 } else { 1 };
            dp[i][j] = (dp[i - 1][j - 1] + sub_cost)
                .min(dp[i - 1][j] + 1) // insertion (extra hyp word)
                .min(dp[i][j - 1] + 1); // deletion (missing ref word)
        }
    }
    // backtrace for the S/I/D split
    let (mut i, mut j) = (h, r);
    let (mut subs, mut ins, mut dels) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = if hyp[i - 1].as_ref() == reference[j - 1].as_ref() { 0 } else { 1 };
            if dp[i][j] == dp[i - 1][j - 1] + sub_cost {
                subs += sub_cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            ins += 1;
            i -= 1;
            continue;
        }
        dels += 1;
        j -= 1;
    }
    EditCounts { substitutions: subs, insertions: ins, deletions: dels, total: dp[h][r] }
}

/// Corpus WER in percent: `100 * total errors / total reference words`.
pub fn corpus_wer<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<f64, MetricError> {
    let ref_words: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    if ref_words == 0 {
        return Err(MetricError::EmptyReferences);
    }
    let errors: usize = pairs.iter().map(|(h, r)| edit_distance(h, r).total).sum();
    Ok(100.0 * errors as f64 / ref_words as f64)
}

/// Nearest-rank percentile: sort ascending and take the element at index
/// `ceil(p/100 * n)` (1-based).
pub fn percentile(values: &[f64], p: u8) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::EmptyPercentile);
    }
    if p == 0 || p > 100 {
        return Err(MetricError::BadPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("latency values are finite"));
    let n = sorted.len();
    let rank = ((p as f64 / 100.0) * n as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

/// Fraction of utterances whose first-pass and second-pass final top
/// hypotheses agree. Empty hypotheses match only each other.
pub fn pfhr<S: AsRef<str>>(pairs: &[(S, S)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(a, b)| a.as_ref() == b.as_ref()).count();
    hits as f64 / pairs.len() as f64
}

/// Aggregated streaming quality of a test set. All times are milliseconds
/// derived from frame indices, not wall-clock measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub ep50: Option<f64>,
    pub ep90: Option<f64>,
    pub pr50: Option<f64>,
    pub pr90: Option<f64>,
    pub pfhr: f64,
    pub utterances: usize,
    pub endpointed: usize,
    pub correct_partial: usize,
}

/// Per-utterance raw observations feeding a [`LatencyReport`].
#[derive(Debug, Clone, Default)]
pub struct LatencyObservations {
    pub endpoint_ms: Vec<Option<f64>>,
    pub partial_ms: Vec<Option<f64>>,
    pub pass_agreement: Vec<bool>,
}

impl LatencyObservations {
    pub fn push(&mut self, endpoint: Option<f64>, partial: Option<f64>, agree: bool) {
        self.endpoint_ms.push(endpoint);
        self.partial_ms.push(partial);
        self.pass_agreement.push(agree);
    }

    /// Utterances without an endpoint or without a correct partial are
    /// excluded from the percentile pools and surface only in the counts.
    pub fn report(&self) -> Result<LatencyReport, MetricError> {
        let n = self.pass_agreement.len();
        if n == 0 {
            return Err(MetricError::EmptyReport);
        }
        let eps: Vec<f64> = self.endpoint_ms.iter().flatten().copied().collect();
        let prs: Vec<f64> = self.partial_ms.iter().flatten().copied().collect();
        let pool = |vals: &[f64], p: u8| -> Option<f64> {
            if vals.is_empty() {
                None
            } else {
                Some(percentile(vals, p).expect("non-empty pool"))
            }
        };
        let hits = self.pass_agreement.iter().filter(|&&x| x).count();
        let report = LatencyReport {
            ep50: pool(&eps, 50),
            ep90: pool(&eps, 90),
            pr50: pool(&prs, 50),
            pr90: pool(&prs, 90),
            pfhr: hits as f64 / n as f64,
            utterances: n,
            endpointed: eps.len(),
            correct_partial: prs.len(),
        };
        debug_assert!(report.ordered());
        Ok(report)
    }
}

impl LatencyReport {
    pub fn ordered(&self) -> bool {
        let le = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => x <= y,
            _ => true,
        };
        le(self.ep50, self.ep90) && le(self.pr50, self.pr90) && (0.0..=1.0).contains(&self.pfhr)
    }

    /// Fixed-order key-value block for humans.
    pub fn to_text_block(&self) -> String {
        let ms = |v: Option<f64>| match v {
            Some(x) => format!("{x:.0}"),
            None => "n/a".to_string(),
        };
        format!(
            "ep50_ms {}\nep90_ms {}\npr50_ms {}\npr90_ms {}\npfhr {:.4}\nutterances {}\nendpointed {}\ncorrect_partial {}\n",
            ms(self.ep50),
            ms(self.ep90),
            ms(self.pr50),
            ms(self.pr90),
            self.pfhr,
            self.utterances,
            self.endpointed,
            self.correct_partial
        )
    }

    /// One line-delimited record per metric, for plotting.
    pub fn to_records(&self) -> String {
        let ms = |v: Option<f64>| match v {
            Some(x) => format!("{x:.0}"),
            None => "n/a".to_string(),
        };
        format!(
            "latency\tep50\t{}\nlatency\tep90\t{}\nlatency\tpr50\t{}\nlatency\tpr90\t{}\nlatency\tpfhr\t{:.4}\n",
            ms(self.ep50),
            ms(self.ep90),
            ms(self.pr50),
            ms(self.pr90),
            self.pfhr
        )
    }
}

/// Words of a normalized transcript (single spaces, no punctuation handling).
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_string()).collect()
}

use crate::decode::DecodeTrace;

/// Endpointer latency: the EOS wall-offset minus the true end of speech.
/// Absent when the decoder never endpointed; negative values are early
/// endpoints.
pub fn endpointer_latency(trace: &DecodeTrace, utt_end_ms: f64) -> Option<f64> {
    trace.eos_wall_ms().map(|w| w - utt_end_ms)
}

/// Partial latency: the wall-offset of the first partial hypothesis whose
/// text equals the full reference, minus the true end of speech. Absent when
/// no partial was ever correct.
pub fn partial_latency(trace: &DecodeTrace, reference: &str, utt_end_ms: f64) -> Option<f64> {
    trace.partials.iter().find(|p| p.text == reference).map(|p| p.wall_ms - utt_end_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn w(s: &str) -> Vec<String> {
        words(s)
    }

    #[test]
    fn identical_sequences_have_zero_errors() {
        let e = edit_distance(&w("a b c"), &w("a b c"));
        assert_eq!(e, EditCounts { substitutions: 0, insertions: 0, deletions: 0, total: 0 });
    }

    #[test]
    fn single_substitution() {
        let e = edit_distance(&w("a b c"), &w("a x c"));
        assert_eq!(e.substitutions, 1);
        assert_eq!(e.total, 1);
    }

    #[test]
    fn kitten_sitting_char_level() {
        let hyp: Vec<String> = "kitten".chars().map(|c| c.to_string()).collect();
        let reference: Vec<String> = "sitting".chars().map(|c| c.to_string()).collect();
        assert_eq!(edit_distance(&hyp, &reference).total, 3);
    }

    #[test]
    fn insertion_and_deletion_split() {
        // hyp has an extra word -> insertion; missing word -> deletion
        let e = edit_distance(&w("a b b c"), &w("a b c"));
        assert_eq!((e.insertions, e.total), (1, 1));
        let e = edit_distance(&w("a c"), &w("a b c"));
        assert_eq!((e.deletions, e.total), (1, 1));
    }

    #[test]
    fn edit_distance_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rand_seq = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let n = rng.gen_range(0..6);
            (0..n).map(|_| ["a", "b", "c"][rng.gen_range(0..3)].to_string()).collect()
        };
        for _ in 0..300 {
            let x = rand_seq(&mut rng);
            let y = rand_seq(&mut rng);
            let z = rand_seq(&mut rng);
            let dxy = edit_distance(&x, &y).total;
            let dyx = edit_distance(&y, &x).total;
            assert_eq!(dxy, dyx, "symmetry {x:?} {y:?}");
            assert_eq!(dxy == 0, x == y, "zero iff equal");
            let dxz = edit_distance(&x, &z).total;
            let dyz = edit_distance(&y, &z).total;
            assert!(dxz <= dxy + dyz, "triangle {x:?} {y:?} {z:?}");
        }
    }

    #[test]
    fn corpus_wer_fixtures() {
        let pairs = vec![(w("a b"), w("a b")), (w("c"), w("c"))];
        assert_eq!(corpus_wer(&pairs).unwrap(), 0.0);

        // one error over 10 reference words
        let pairs = vec![(w("x b c d e"), w("a b c d e")), (w("f g h i j"), w("f g h i j"))];
        assert!((corpus_wer(&pairs).unwrap() - 10.0).abs() < 1e-12);

        let empty: Vec<(Vec<String>, Vec<String>)> = vec![(w("a"), vec![])];
        assert_eq!(corpus_wer(&empty), Err(MetricError::EmptyReferences));
    }

    #[test]
    fn corpus_wer_matches_independent_accumulation_and_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rand_seq = |rng: &mut ChaCha8Rng, lo: usize| -> Vec<String> {
            let n = rng.gen_range(lo..7);
            (0..n).map(|_| ["u", "v", "w", "z"][rng.gen_range(0..4)].to_string()).collect()
        };
        let pairs: Vec<(Vec<String>, Vec<String>)> =
            (0..40).map(|_| (rand_seq(&mut rng, 0), rand_seq(&mut rng, 1))).collect();
        let got = corpus_wer(&pairs).unwrap();
        // independent accumulation
        let mut errs = 0usize;
        let mut refs = 0usize;
        for (h, r) in &pairs {
            errs += edit_distance(h, r).total;
            refs += r.len();
        }
        let want = 100.0 * errs as f64 / refs as f64;
        assert!((got - want).abs() < 1e-12);
        // reordering
        let mut rev = pairs.clone();
        rev.reverse();
        assert_eq!(corpus_wer(&rev).unwrap(), got);
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[10.0, 20.0, 30.0, 40.0], 50).unwrap(), 20.0);
        assert_eq!(percentile(&[42.0], 50).unwrap(), 42.0);
        assert_eq!(percentile(&[42.0], 90).unwrap(), 42.0);
        // p90 of 10 distinct sorted values is the 9th
        let vals: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        assert_eq!(percentile(&vals, 90).unwrap(), 9.0);
        assert_eq!(percentile(&[], 50), Err(MetricError::EmptyPercentile));
    }

    #[test]
    fn percentile_ordering_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-500.0..500.0)).collect();
            assert!(percentile(&vals, 50).unwrap() <= percentile(&vals, 90).unwrap());
        }
    }

    #[test]
    fn pfhr_counting() {
        assert_eq!(pfhr(&[("a b", "a b"), ("c", "c")]), 1.0);
        let two_of_three = pfhr(&[("a", "a"), ("b", "x"), ("c", "c")]);
        assert!((two_of_three - 2.0 / 3.0).abs() < 1e-9);
        // empty hypotheses count as a match only when both are empty
        assert_eq!(pfhr(&[("", "")]), 1.0);
        assert_eq!(pfhr(&[("", "a")]), 0.0);
    }

    #[test]
    fn latency_report_pools_and_counts() {
        let mut obs = LatencyObservations::default();
        obs.push(Some(100.0), Some(20.0), true);
        obs.push(Some(50.0), None, true);
        obs.push(None, Some(-30.0), false);
        let r = obs.report().unwrap();
        assert_eq!(r.utterances, 3);
        assert_eq!(r.endpointed, 2);
        assert_eq!(r.correct_partial, 2);
        assert_eq!(r.ep50, Some(50.0));
        assert_eq!(r.ep90, Some(100.0));
        assert_eq!(r.pr50, Some(-30.0));
        assert_eq!(r.pr90, Some(20.0));
        assert!((r.pfhr - 2.0 / 3.0).abs() < 1e-9);
        assert!(r.ordered());
    }

    #[test]
    fn report_text_block_is_stable() {
        let mut obs = LatencyObservations::default();
        obs.push(Some(100.0), Some(20.0), true);
        let r = obs.report().unwrap();
        assert_eq!(
            r.to_text_block(),
            "ep50_ms 100\nep90_ms 100\npr50_ms 20\npr90_ms 20\npfhr 1.0000\nutterances 1\nendpointed 1\ncorrect_partial 1\n"
        );
    }
}
