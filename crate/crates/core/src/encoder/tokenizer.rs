use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]"];

/// Lowercased whitespace tokenizer over a closed vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabTokenizer {
    /// Ordered tokens; index = id. Specials occupy ids 0..4.
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    max_text_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// `true` for real tokens (CLS, words, SEP), `false` for padding.
    pub attention_mask: Vec<bool>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl VocabTokenizer {
    /// Builds a tokenizer whose words follow the four special tokens.
    pub fn new<S: AsRef<str>>(words: &[S], max_text_len: usize) -> Result<Self> {
        if max_text_len < 2 {
            return Err(Error::Config(format!(
                "max_text_len {max_text_len} cannot hold CLS and SEP"
            )));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut ids = HashMap::new();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            ids.insert(s.to_string(), i);
        }
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid vocabulary entry {w:?}")));
            }
            if ids.contains_key(&w) {
                return Err(Error::Validation(format!("duplicate vocabulary entry {w:?}")));
            }
            ids.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Self {
            tokens,
            ids,
            max_text_len,
        })
    }

    /// Number of ids, specials included.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn max_text_len(&self) -> usize {
        self.max_text_len
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(&word.to_lowercase()).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS] words.. [SEP] [PAD]..`, truncating words so SEP always fits.
    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let lower = text.to_lowercase();
        let mut ids = vec![CLS];
        ids.extend(
            lower
                .split_whitespace()
                .take(self.max_text_len - 2)
                .map(|w| self.ids.get(w).copied().unwrap_or(UNK)),
        );
        ids.push(SEP);
        let real = ids.len();
        ids.resize(self.max_text_len, PAD);
        let attention_mask = (0..self.max_text_len).map(|i| i < real).collect();
        TokenizedText { ids, attention_mask }
    }

    /// One token per line, line number = id.
    pub fn to_vocab_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_vocab_file_str(text: &str, max_text_len: usize) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if lines.get(i) != Some(want) {
                return Err(Error::Validation(format!(
                    "vocabulary line {} must be {want}, found {:?}",
                    i + 1,
                    lines.get(i)
                )));
            }
        }
        Self::new(&lines[SPECIAL_TOKENS.len()..], max_text_len)
    }

    pub fn write_vocab_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_vocab_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_vocab_file(path: &Path, max_text_len: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_vocab_file_str(&text, max_text_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> VocabTokenizer {
        VocabTokenizer::new(&["red", "circle", "square"], 6).unwrap()
    }

    #[test]
    fn known_words_map_directly() {
        let t = tok();
        let out = t.tokenize("Red circle");
        let (red, circle) = (t.id("red").unwrap(), t.id("circle").unwrap());
        assert_eq!(out.ids, vec![CLS, red, circle, SEP, PAD, PAD]);
        assert_eq!(out.attention_mask, vec![true, true, true, true, false, false]);
    }

    #[test]
    fn unknown_words_become_unk() {
        let t = tok();
        let out = t.tokenize("xyzzy circle");
        assert_eq!(out.ids[..4], [CLS, UNK, t.id("circle").unwrap(), SEP]);
    }

    #[test]
    fn empty_text_is_cls_sep_then_padding() {
        let out = tok().tokenize("");
        assert_eq!(out.ids, vec![CLS, SEP, PAD, PAD, PAD, PAD]);
    }

    #[test]
    fn long_text_is_truncated_keeping_sep() {
        let out = tok().tokenize("red red red red red red red");
        assert_eq!(out.ids.len(), 6);
        assert_eq!(out.ids[5], SEP);
        assert!(out.attention_mask.iter().all(|&m| m));
    }

    #[test]
    fn vocab_file_lists_specials_first() {
        let t = tok();
        let s = t.to_vocab_file_string();
        assert!(s.starts_with("[CLS]\n[SEP]\n[PAD]\n[UNK]\nred\n"));
        let back = VocabTokenizer::from_vocab_file_str(&s, 6).unwrap();
        assert_eq!(back, t);
        assert!(VocabTokenizer::from_vocab_file_str("red\n", 6).is_err());
    }
}
