//! Corpus file layout.
//!
//! ```text
//! <dir>/paired.tsv            id <TAB> transcript <TAB> feature ref <TAB> word:start:end;...
//! <dir>/features/<id>.feat    u64 T, u64 dim, then T*dim f64 values (little-endian)
//! <dir>/paired_phones.tsv     id <TAB> phone:start:end;...   (phoneme-level spans)
//! <dir>/unpaired.txt          one sentence per line
//! <dir>/head_test.tsv, rare_test.tsv (+ feature sidecars, + *_phones.tsv)
//! <dir>/lexicon.tsv           word <TAB> phoneme phoneme ...
//! <dir>/vocab_wp.txt, vocab_phones.txt   one unit per line, index = line number
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Array;
use crate::text::{
    tokenize_word_pieces, AlignedTranscript, Lexicon, PhoneSpan, UnitKind, Vocab, WordSpan, EOS_ID,
};

use super::{generate::Corpus, GenError, PairedExample};

fn io_err(path: &Path, source: std::io::Error) -> GenError {
    GenError::Io { path: path.display().to_string(), source }
}

fn bad(path: &Path, reason: impl Into<String>) -> GenError {
    GenError::BadCorpusFile { path: path.display().to_string(), reason: reason.into() }
}

fn write_features(path: &Path, features: &Array) -> Result<(), GenError> {
    let mut buf = Vec::with_capacity(16 + features.numel() * 8);
    buf.extend_from_slice(&(features.shape()[0] as u64).to_le_bytes());
    buf.extend_from_slice(&(features.shape()[1] as u64).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

fn read_features(path: &Path) -> Result<Array, GenError> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    let t = u64::from_le_bytes(header[..8].try_into().expect("8 bytes")) as usize;
    let dim = u64::from_le_bytes(header[8..].try_into().expect("8 bytes")) as usize;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(|e| io_err(path, e))?;
    if raw.len() != t * dim * 8 {
        return Err(bad(path, format!("expected {} values, found {} bytes", t * dim, raw.len())));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Array::new(vec![t, dim], data))
}

fn spans_to_field<T, F: Fn(&T) -> (String, usize, usize)>(spans: &[T], f: F) -> String {
    spans
        .iter()
        .map(|s| {
            let (name, start, end) = f(s);
            format!("{name}:{start}:{end}")
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_spans(field: &str, path: &Path) -> Result<Vec<(String, usize, usize)>, GenError> {
    field
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|s| {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 3 {
                return Err(bad(path, format!("bad span {s:?}")));
            }
            let start = parts[1].parse().map_err(|_| bad(path, format!("bad span {s:?}")))?;
            let end = parts[2].parse().map_err(|_| bad(path, format!("bad span {s:?}")))?;
            Ok((parts[0].to_string(), start, end))
        })
        .collect()
}

fn write_split(dir: &Path, name: &str, examples: &[PairedExample]) -> Result<(), GenError> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| io_err(&feat_dir, e))?;
    let mut tsv = String::new();
    let mut phones = String::new();
    for ex in examples {
        let feat_ref = format!("features/{}.feat", ex.id);
        write_features(&dir.join(&feat_ref), &ex.features)?;
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            ex.id,
            ex.transcript,
            feat_ref,
            spans_to_field(&ex.alignment.words, |w| (w.word.clone(), w.start, w.end)),
        ));
        phones.push_str(&format!(
            "{}\t{}\n",
            ex.id,
            spans_to_field(&ex.alignment.phones, |p| (p.phone.to_string(), p.start, p.end)),
        ));
    }
    let tsv_path = dir.join(format!("{name}.tsv"));
    fs::write(&tsv_path, tsv).map_err(|e| io_err(&tsv_path, e))?;
    let ph_path = dir.join(format!("{name}_phones.tsv"));
    fs::write(&ph_path, phones).map_err(|e| io_err(&ph_path, e))
}

fn load_split(
    dir: &Path,
    name: &str,
    wp_vocab: &Vocab,
    frame_ms: f64,
) -> Result<Vec<PairedExample>, GenError> {
    let tsv_path = dir.join(format!("{name}.tsv"));
    let tsv = fs::read_to_string(&tsv_path).map_err(|e| io_err(&tsv_path, e))?;
    let ph_path = dir.join(format!("{name}_phones.tsv"));
    let phones_text = fs::read_to_string(&ph_path).map_err(|e| io_err(&ph_path, e))?;
    let mut phone_lines = phones_text.lines();

    let mut out = Vec::new();
    for line in tsv.lines() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(&tsv_path, format!("expected 4 columns, got {}", cols.len())));
        }
        let (id, transcript, feat_ref, word_field) = (cols[0], cols[1], cols[2], cols[3]);
        let features = read_features(&dir.join(feat_ref))?;
        let words = parse_spans(word_field, &tsv_path)?
            .into_iter()
            .map(|(word, start, end)| WordSpan { word, start, end })
            .collect();
        let phone_line = phone_lines
            .next()
            .ok_or_else(|| bad(&ph_path, "fewer phone records than utterances"))?;
        let (ph_id, ph_field) = phone_line
            .split_once('\t')
            .ok_or_else(|| bad(&ph_path, "missing tab"))?;
        if ph_id != id {
            return Err(bad(&ph_path, format!("phone record {ph_id} does not match {id}")));
        }
        let phones = parse_spans(ph_field, &ph_path)?
            .into_iter()
            .map(|(p, start, end)| {
                let phone = p.parse().map_err(|_| bad(&ph_path, format!("bad phone id {p:?}")))?;
                Ok(PhoneSpan { phone, start, end })
            })
            .collect::<Result<Vec<_>, GenError>>()?;
        let mut y = tokenize_word_pieces(transcript, wp_vocab)?;
        y.push(EOS_ID);
        let t = features.shape()[0];
        out.push(PairedExample {
            id: id.to_string(),
            features,
            transcript: transcript.to_string(),
            y,
            alignment: AlignedTranscript { words, phones },
            utt_end_ms: t as f64 * frame_ms,
        });
    }
    Ok(out)
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), GenError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_split(dir, "paired", &corpus.paired_train)?;
    write_split(dir, "head_test", &corpus.head_test)?;
    write_split(dir, "rare_test", &corpus.rare_test)?;
    let unpaired = dir.join("unpaired.txt");
    fs::write(&unpaired, corpus.unpaired_text.join("\n") + "\n")
        .map_err(|e| io_err(&unpaired, e))?;
    corpus.wp_vocab.save(&dir.join("vocab_wp.txt"))?;
    corpus.phone_vocab.save(&dir.join("vocab_phones.txt"))?;
    corpus.lexicon.save(&dir.join("lexicon.tsv"), &corpus.phone_vocab)?;
    Ok(())
}

pub fn load_corpus(dir: &Path, frame_ms: f64) -> Result<Corpus, GenError> {
    let wp_vocab = Vocab::load(&dir.join("vocab_wp.txt"), UnitKind::WordPiece)?;
    let phone_vocab = Vocab::load(&dir.join("vocab_phones.txt"), UnitKind::Phoneme)?;
    let lexicon = Lexicon::load(&dir.join("lexicon.tsv"), &phone_vocab)?;
    let unpaired_path = dir.join("unpaired.txt");
    let unpaired_text = fs::read_to_string(&unpaired_path)
        .map_err(|e| io_err(&unpaired_path, e))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.to_string())
        .collect();
    Ok(Corpus {
        paired_train: load_split(dir, "paired", &wp_vocab, frame_ms)?,
        head_test: load_split(dir, "head_test", &wp_vocab, frame_ms)?,
        rare_test: load_split(dir, "rare_test", &wp_vocab, frame_ms)?,
        unpaired_text,
        lexicon,
        wp_vocab,
        phone_vocab,
    })
}

/// Load a single split by name (for evaluation on one test set).
pub fn load_examples(
    dir: &Path,
    name: &str,
    wp_vocab: &Vocab,
    frame_ms: f64,
) -> Result<Vec<PairedExample>, GenError> {
    load_split(dir, name, wp_vocab, frame_ms)
}
