//! Token inventories for the two text representations.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TextError;

/// Which unit inventory a vocabulary (or a text input stream) uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Phoneme,
    WordPiece,
}

impl UnitKind {
    pub fn parse(s: &str) -> Option<UnitKind> {
        match s {
            "phoneme" => Some(UnitKind::Phoneme),
            "word_piece" => Some(UnitKind::WordPiece),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            UnitKind::Phoneme => "phoneme",
            UnitKind::WordPiece => "word_piece",
        }
    }
}

pub const BLANK_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const PAD_ID: u32 = 3;

const SPECIALS: [&str; 4] = ["<blank>", "<eos>", "<mask>", "<pad>"];

/// The word separator unit used by word-piece vocabularies.
pub const SEPARATOR: &str = "_";

/// An ordered unit inventory. Index 0 is always blank; the remaining
/// specials (eos, mask, pad) precede the content units.
#[derive(Debug, Clone)]
pub struct Vocab {
    unit_kind: UnitKind,
    units: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(unit_kind: UnitKind, content_units: Vec<String>) -> Result<Vocab, TextError> {
        let mut units: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        units.extend(content_units);
        let mut index = HashMap::new();
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.clone(), i as u32).is_some() {
                return Err(TextError::DuplicateUnit(u.clone()));
            }
        }
        Ok(Vocab { unit_kind, units, index })
    }

    pub fn unit_kind(&self) -> UnitKind {
        self.unit_kind
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, unit: &str) -> Option<u32> {
        self.index.get(unit).copied()
    }

    pub fn unit(&self, id: u32) -> &str {
        &self.units[id as usize]
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < SPECIALS.len() as u32
    }

    /// Ids of content units, in vocabulary order.
    pub fn content_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (SPECIALS.len() as u32..self.units.len() as u32).map(|i| i)
    }

    /// Longest content unit in characters (tokenizer window).
    pub fn max_unit_chars(&self) -> usize {
        self.units[SPECIALS.len()..]
            .iter()
            .map(|u| u.chars().count())
            .max()
            .unwrap_or(0)
    }

    /// Render label ids back to text: separators become spaces, specials are
    /// dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            let u = self.unit(id);
            if u == SEPARATOR {
                out.push(' ');
            } else {
                out.push_str(u);
            }
        }
        out
    }

    /// One unit per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut text = String::new();
        for u in &self.units {
            text.push_str(u);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| TextError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path, unit_kind: UnitKind) -> Result<Vocab, TextError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TextError::Io { path: path.display().to_string(), source: e })?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(TextError::BadVocabFile(path.display().to_string()));
        }
        let content = lines[SPECIALS.len()..].iter().map(|s| s.to_string()).collect();
        Vocab::new(unit_kind, content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_fixed_and_disjoint() {
        let v = Vocab::new(UnitKind::WordPiece, vec!["a".into(), "ab".into()]).unwrap();
        assert_eq!(v.id("<blank>"), Some(BLANK_ID));
        assert_eq!(v.id("<eos>"), Some(EOS_ID));
        assert_eq!(v.id("<mask>"), Some(MASK_ID));
        assert_eq!(v.id("<pad>"), Some(PAD_ID));
        assert_eq!(v.id("a"), Some(4));
        assert!(v.is_special(0) && !v.is_special(4));
    }

    #[test]
    fn duplicate_units_rejected() {
        let err = Vocab::new(UnitKind::WordPiece, vec!["a".into(), "a".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let v = Vocab::new(UnitKind::Phoneme, vec!["k".into(), "aa".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path, UnitKind::Phoneme).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.id("aa"), v.id("aa"));
    }
}
