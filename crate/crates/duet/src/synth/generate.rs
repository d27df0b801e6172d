//! Corpus construction: lexicon, prototypes, utterance synthesis, splits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Array;
use crate::text::{
    sample_duration, tokenize_word_pieces, AlignedTranscript, Lexicon, PhoneSpan, UnitKind, Vocab,
    WordSpan, EOS_ID, SEPARATOR,
};

use super::{GenError, GeneratorConfig, PairedExample};

const STAGE_TABLES: u64 = 1;
const STAGE_LEXICON: u64 = 2;
const STAGE_PAIRED: u64 = 3;
const STAGE_UNPAIRED: u64 = 4;
const STAGE_TESTS: u64 = 5;

fn stage_rng(seed: u64, stage: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 40) | index);
    rng
}

/// Everything needed to synthesize more utterances for a generated corpus.
#[derive(Debug, Clone)]
pub struct GeneratorTables {
    /// One prototype vector per phoneme, rows of length `feature_dim`.
    pub prototypes: Vec<Vec<f64>>,
    /// Per-phoneme true duration means/stds in frames.
    pub duration_means: Vec<f64>,
    pub duration_stds: Vec<f64>,
    pub noise_std: f64,
    pub frame_ms: f64,
}

/// A generated or loaded corpus: splits plus the shared inventories.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub paired_train: Vec<PairedExample>,
    pub unpaired_text: Vec<String>,
    pub head_test: Vec<PairedExample>,
    pub rare_test: Vec<PairedExample>,
    pub lexicon: Lexicon,
    pub wp_vocab: Vocab,
    pub phone_vocab: Vocab,
}

/// Generation output: the corpus plus ground-truth tables and the word split.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    pub tables: GeneratorTables,
    pub head_words: Vec<String>,
    pub rare_words: Vec<String>,
}

fn letters(count: usize) -> Vec<char> {
    (0..count).map(|i| (b'a' + i as u8) as char).collect()
}

/// Prototypes: orthonormalized random rows scaled to norm 2; phonemes beyond
/// the feature dimension reuse rows with flipped sign, keeping every pair
/// well separated.
fn build_prototypes(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> =
            (0..dim).map(|_| crate::text::sample_standard_normal(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        basis.push(v);
    }
    (0..count)
        .map(|k| {
            let sign = if (k / dim) % 2 == 1 { -2.0 } else { 2.0 };
            basis[k % dim].iter().map(|x| x * sign).collect()
        })
        .collect()
}

/// Accuracy of the nearest-prototype linear classifier on noisy single
/// frames; the floor that guarantees the toy task is learnable.
pub fn nearest_prototype_accuracy(
    prototypes: &[Vec<f64>],
    noise_std: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut correct = 0usize;
    for i in 0..samples {
        let truth = i % prototypes.len();
        let frame: Vec<f64> = prototypes[truth]
            .iter()
            .map(|&p| p + noise_std * crate::text::sample_standard_normal(rng))
            .collect();
        let best = prototypes
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da: f64 = a.iter().zip(&frame).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f64 = b.iter().zip(&frame).map(|(x, y)| (x - y) * (x - y)).sum();
                da.partial_cmp(&db).expect("finite distances")
            })
            .map(|(k, _)| k)
            .expect("non-empty prototypes");
        if best == truth {
            correct += 1;
        }
    }
    correct as f64 / samples as f64
}

/// Distinct two-letter syllables, split into a head and a rare inventory.
/// The head inventory starts with the cycle (l0 l1, l1 l2, ...) so every
/// letter occurs in head words; duration statistics then see every phoneme.
fn build_syllables(
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, Vec<String>) {
    let ls = letters(cfg.phoneme_count);
    let n = ls.len();
    let mut head: Vec<String> = Vec::with_capacity(cfg.head_syllables);
    for i in 0..n.min(cfg.head_syllables) {
        head.push(format!("{}{}", ls[i], ls[(i + 1) % n]));
    }
    let mut rest: Vec<String> = Vec::new();
    for &a in &ls {
        for &b in &ls {
            let pair = format!("{a}{b}");
            if !head.contains(&pair) {
                rest.push(pair);
            }
        }
    }
    rest.shuffle(rng);
    while head.len() < cfg.head_syllables {
        head.push(rest.pop().expect("validated inventory size"));
    }
    let rare: Vec<String> = (0..cfg.rare_syllables)
        .map(|_| rest.pop().expect("validated inventory size"))
        .collect();
    (head, rare)
}

/// Words are 2-3 syllable concatenations; cycling through the inventory keeps
/// every syllable in use. Rare words draw exclusively from the rare
/// inventory, so their pieces never occur inside head words.
fn build_words(
    count: usize,
    syllables: &[String],
    fixed_len: Option<usize>,
    taken: &mut BTreeSet<String>,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let mut words = Vec::with_capacity(count);
    let mut cursor = 0usize;
    while words.len() < count {
        let len = fixed_len.unwrap_or_else(|| rng.gen_range(2..=3));
        let mut w = String::new();
        // first syllable cycles for balanced coverage, the rest are random
        w.push_str(&syllables[cursor % syllables.len()]);
        cursor += 1;
        for _ in 1..len {
            w.push_str(&syllables[rng.gen_range(0..syllables.len())]);
        }
        if taken.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Word-piece inventory: separator, every corpus letter, and the most
/// frequent bigrams. Bigrams are counted over non-overlapping pairs of each
/// lexicon word, ranked by count then lexicographically.
fn build_wp_vocab(
    words: &[String],
    alphabet: &[char],
    bigram_budget: usize,
) -> Result<Vocab, GenError> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for w in words {
        let chars: Vec<char> = w.chars().collect();
        let mut i = 0;
        while i + 1 < chars.len() {
            let bg: String = chars[i..i + 2].iter().collect();
            *counts.entry(bg).or_insert(0) += 1;
            i += 2;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut content: Vec<String> = vec![SEPARATOR.to_string()];
    content.extend(alphabet.iter().map(|c| c.to_string()));
    content.extend(ranked.into_iter().take(bigram_budget).map(|(bg, _)| bg));
    Ok(Vocab::new(UnitKind::WordPiece, content)?)
}

fn build_lexicon(words: &[String], phone_vocab: &Vocab) -> Lexicon {
    let mut lex = Lexicon::new();
    for w in words {
        let phones: Vec<u32> = w
            .chars()
            .map(|c| phone_vocab.id(&c.to_string()).expect("alphabet covers lexicon"))
            .collect();
        lex.insert(w, phones);
    }
    lex
}

/// Synthesize one utterance: per phoneme, draw a duration, emit that many
/// noisy prototype frames, and record exact spans as the alignment.
pub fn synthesize_utterance(
    id: &str,
    words: &[String],
    lexicon: &Lexicon,
    wp_vocab: &Vocab,
    phone_vocab: &Vocab,
    tables: &GeneratorTables,
    rng: &mut ChaCha8Rng,
) -> Result<PairedExample, GenError> {
    let _ = phone_vocab;
    let dim = tables.prototypes[0].len();
    let mut data: Vec<f64> = Vec::new();
    let mut word_spans = Vec::with_capacity(words.len());
    let mut phone_spans = Vec::new();
    let mut t = 0usize;
    for word in words {
        let phones = lexicon
            .get(word)
            .ok_or_else(|| GenError::OutOfLexicon(word.clone()))?;
        let word_start = t;
        for &p in phones {
            let unit = p as usize - 4; // content phoneme index
            let d = sample_duration(
                tables.duration_means[unit],
                tables.duration_stds[unit],
                1,
                rng,
            );
            for _ in 0..d {
                for &v in &tables.prototypes[unit] {
                    let noise = tables.noise_std * crate::text::sample_standard_normal(rng);
                    data.push(v + noise);
                }
            }
            phone_spans.push(PhoneSpan { phone: p, start: t, end: t + d });
            t += d;
        }
        word_spans.push(WordSpan { word: word.clone(), start: word_start, end: t });
    }
    let transcript = words.join(" ");
    let mut y = tokenize_word_pieces(&transcript, wp_vocab)?;
    y.push(EOS_ID);
    Ok(PairedExample {
        id: id.to_string(),
        features: Array::new(vec![t, dim], data),
        transcript,
        y,
        alignment: AlignedTranscript { words: word_spans, phones: phone_spans },
        utt_end_ms: t as f64 * tables.frame_ms,
    })
}

fn sample_words(
    pool: &[String],
    range: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let n = rng.gen_range(range.0..=range.1);
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
}

/// Build the full corpus: lexicon and vocabularies, paired training set with
/// capped rare-word occurrences, rare-heavy unpaired text, and two disjoint
/// test splits.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<GeneratedCorpus, GenError> {
    cfg.validate()?;

    let mut table_rng = stage_rng(cfg.seed, STAGE_TABLES, 0);
    let prototypes = build_prototypes(cfg.phoneme_count, cfg.feature_dim, &mut table_rng);
    let duration_means: Vec<f64> = (0..cfg.phoneme_count)
        .map(|_| table_rng.gen_range(cfg.duration_mean - 1.5..=cfg.duration_mean + 1.5).max(2.0))
        .collect();
    let duration_stds = vec![cfg.duration_std; cfg.phoneme_count];
    let tables = GeneratorTables {
        prototypes,
        duration_means,
        duration_stds,
        noise_std: cfg.noise_std,
        frame_ms: cfg.frame_ms,
    };

    let mut lex_rng = stage_rng(cfg.seed, STAGE_LEXICON, 0);
    let (head_syll, rare_syll) = build_syllables(cfg, &mut lex_rng);
    let mut taken = BTreeSet::new();
    let head_words =
        build_words(cfg.lexicon_size - cfg.rare_words, &head_syll, None, &mut taken, &mut lex_rng);
    let rare_words = if cfg.rare_words > 0 {
        build_words(cfg.rare_words, &rare_syll, Some(3), &mut taken, &mut lex_rng)
    } else {
        Vec::new()
    };

    let alphabet = letters(cfg.phoneme_count);
    let mut all_words = head_words.clone();
    all_words.extend(rare_words.iter().cloned());
    let wp_vocab = build_wp_vocab(&all_words, &alphabet, cfg.bigram_vocab)?;
    let phone_vocab = Vocab::new(
        UnitKind::Phoneme,
        alphabet.iter().map(|c| c.to_string()).collect(),
    )?;
    let lexicon = build_lexicon(&all_words, &phone_vocab);

    // paired transcripts: head words, then capped rare-word injections
    let mut paired_words: Vec<Vec<String>> = (0..cfg.paired_size)
        .map(|i| {
            let mut rng = stage_rng(cfg.seed, STAGE_PAIRED, i as u64);
            sample_words(&head_words, cfg.utterance_words, &mut rng)
        })
        .collect();
    let mut inject_rng = stage_rng(cfg.seed, STAGE_PAIRED, u64::MAX);
    if cfg.rare_paired_cap > 1 {
        for rare in &rare_words {
            let occurrences = inject_rng.gen_range(1..cfg.rare_paired_cap);
            for _ in 0..occurrences {
                let utt = inject_rng.gen_range(0..paired_words.len());
                let pos = inject_rng.gen_range(0..paired_words[utt].len());
                paired_words[utt][pos] = rare.clone();
            }
        }
    }
    let mut paired_train = Vec::with_capacity(cfg.paired_size);
    for (i, words) in paired_words.iter().enumerate() {
        let mut rng = stage_rng(cfg.seed, STAGE_PAIRED, (1 << 32) | i as u64);
        paired_train.push(synthesize_utterance(
            &format!("train_{i:06}"),
            words,
            &lexicon,
            &wp_vocab,
            &phone_vocab,
            &tables,
            &mut rng,
        )?);
    }

    // unpaired text, rare-rich, with guaranteed coverage of every rare word
    let mut unpaired_text: Vec<String> = (0..cfg.unpaired_size)
        .map(|i| {
            let mut rng = stage_rng(cfg.seed, STAGE_UNPAIRED, i as u64);
            let n = rng.gen_range(cfg.utterance_words.0..=cfg.utterance_words.1);
            let words: Vec<String> = (0..n)
                .map(|_| {
                    if !rare_words.is_empty() && rng.gen_bool(cfg.rare_text_prob) {
                        rare_words[rng.gen_range(0..rare_words.len())].clone()
                    } else {
                        head_words[rng.gen_range(0..head_words.len())].clone()
                    }
                })
                .collect();
            words.join(" ")
        })
        .collect();
    let mut cover_rng = stage_rng(cfg.seed, STAGE_UNPAIRED, u64::MAX);
    for (k, rare) in rare_words.iter().enumerate() {
        let covered = unpaired_text.iter().any(|s| s.split(' ').any(|w| w == rare));
        if !covered {
            let idx = k % unpaired_text.len();
            let mut words: Vec<String> =
                unpaired_text[idx].split(' ').map(|w| w.to_string()).collect();
            let pos = cover_rng.gen_range(0..words.len());
            words[pos] = rare.clone();
            unpaired_text[idx] = words.join(" ");
        }
    }

    // test sets, transcript-disjoint from training and from each other
    let mut seen: BTreeSet<String> =
        paired_train.iter().map(|e| e.transcript.clone()).collect();
    let synth_test = |name: &str,
                          count: usize,
                          force_rare: bool,
                          seen: &mut BTreeSet<String>|
     -> Result<Vec<PairedExample>, GenError> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = stage_rng(cfg.seed, STAGE_TESTS, ((force_rare as u64) << 32) | i as u64);
            let mut attempts = 0;
            let words = loop {
                attempts += 1;
                if attempts > 200 {
                    return Err(GenError::TestSetExhausted(200));
                }
                let mut words = sample_words(&head_words, cfg.utterance_words, &mut rng);
                if force_rare {
                    let pos = rng.gen_range(0..words.len());
                    words[pos] = rare_words[i % rare_words.len()].clone();
                }
                if seen.insert(words.join(" ")) {
                    break words;
                }
            };
            out.push(synthesize_utterance(
                &format!("{name}_{i:06}"),
                &words,
                &lexicon,
                &wp_vocab,
                &phone_vocab,
                &tables,
                &mut rng,
            )?);
        }
        Ok(out)
    };
    let head_test = synth_test("head", cfg.head_test_size, false, &mut seen)?;
    let rare_test = if cfg.rare_test_size > 0 {
        synth_test("rare", cfg.rare_test_size, true, &mut seen)?
    } else {
        Vec::new()
    };

    Ok(GeneratedCorpus {
        corpus: Corpus {
            paired_train,
            unpaired_text,
            head_test,
            rare_test,
            lexicon,
            wp_vocab,
            phone_vocab,
        },
        tables,
        head_words,
        rare_words,
    })
}
