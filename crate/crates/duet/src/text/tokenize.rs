//! Word-piece and phoneme tokenizers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::vocab::{UnitKind, Vocab, SEPARATOR};
use super::TextError;

/// Greedy longest-match-first segmentation over the vocabulary's content
/// units. Whitespace maps to the separator unit, so decoding the ids
/// reproduces the text exactly.
pub fn tokenize_word_pieces(text: &str, vocab: &Vocab) -> Result<Vec<u32>, TextError> {
    let chars: Vec<char> = text.chars().collect();
    let max_len = vocab.max_unit_chars();
    let mut ids = Vec::new();
    let mut pos = 0usize;
    while pos < chars.len() {
        if chars[pos].is_whitespace() {
            let id = vocab
                .id(SEPARATOR)
                .ok_or_else(|| TextError::CharOutsideAlphabet { ch: ' ', pos })?;
            ids.push(id);
            pos += 1;
            continue;
        }
        let mut matched = None;
        let end = (pos + max_len).min(chars.len());
        for len in (1..=end - pos).rev() {
            let cand: String = chars[pos..pos + len].iter().collect();
            if cand.contains(char::is_whitespace) {
                continue;
            }
            if let Some(id) = vocab.id(&cand) {
                matched = Some((id, len));
                break;
            }
        }
        match matched {
            Some((id, len)) => {
                ids.push(id);
                pos += len;
            }
            None => return Err(TextError::CharOutsideAlphabet { ch: chars[pos], pos }),
        }
    }
    Ok(ids)
}

/// Word-piece ids of a sentence without separator units: per-word pieces
/// concatenated in word order. This is the text-injection input stream,
/// where word gaps carry no duration.
pub fn tokenize_word_pieces_no_separator(text: &str, vocab: &Vocab) -> Result<Vec<u32>, TextError> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        ids.extend(tokenize_word_pieces(word, vocab)?);
    }
    Ok(ids)
}

/// Pronunciation table mapping words to phoneme id sequences.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<u32>>,
}

impl Lexicon {
    pub fn new() -> Lexicon {
        Lexicon::default()
    }

    pub fn insert(&mut self, word: &str, phonemes: Vec<u32>) {
        self.entries.insert(word.to_string(), phonemes);
    }

    pub fn get(&self, word: &str) -> Option<&[u32]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `word <TAB> phoneme phoneme ...` record per line.
    pub fn save(&self, path: &Path, phone_vocab: &Vocab) -> Result<(), TextError> {
        let mut text = String::new();
        for (word, phones) in &self.entries {
            text.push_str(word);
            text.push('\t');
            let syms: Vec<&str> = phones.iter().map(|&p| phone_vocab.unit(p)).collect();
            text.push_str(&syms.join(" "));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| TextError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path, phone_vocab: &Vocab) -> Result<Lexicon, TextError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TextError::Io { path: path.display().to_string(), source: e })?;
        let mut lex = Lexicon::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (word, rest) = line
                .split_once('\t')
                .ok_or_else(|| TextError::BadLexiconLine(line.to_string()))?;
            let mut phones = Vec::new();
            for sym in rest.split_whitespace() {
                let id = phone_vocab
                    .id(sym)
                    .ok_or_else(|| TextError::BadLexiconLine(line.to_string()))?;
                phones.push(id);
            }
            lex.insert(word, phones);
        }
        Ok(lex)
    }
}

/// Phoneme ids of a sentence: per-word pronunciations concatenated in word
/// order, no separators.
pub fn tokenize_phonemes(text: &str, lexicon: &Lexicon) -> Result<Vec<u32>, TextError> {
    let mut ids = Vec::new();
    for word in text.split_whitespace() {
        let phones = lexicon
            .get(word)
            .ok_or_else(|| TextError::OutOfLexicon(word.to_string()))?;
        ids.extend_from_slice(phones);
    }
    Ok(ids)
}

/// One sentence's injected-text views: the input unit stream and the
/// word-piece targets, both derived from the same text.
#[derive(Debug, Clone)]
pub struct TextExample {
    pub x_t: Vec<u32>,
    pub y_t: Vec<u32>,
    pub source_text: String,
}

pub fn build_text_example(
    text: &str,
    unit_kind: UnitKind,
    wp_vocab: &Vocab,
    lexicon: &Lexicon,
) -> Result<TextExample, TextError> {
    if text.split_whitespace().next().is_none() {
        return Err(TextError::EmptyText);
    }
    let x_t = match unit_kind {
        UnitKind::Phoneme => tokenize_phonemes(text, lexicon)?,
        UnitKind::WordPiece => tokenize_word_pieces_no_separator(text, wp_vocab)?,
    };
    let y_t = tokenize_word_pieces(text, wp_vocab)?;
    Ok(TextExample { x_t, y_t, source_text: text.to_string() })
}
