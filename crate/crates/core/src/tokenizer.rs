//! Word-level tokenizer with byte fallback.
//!
//! Ids `0..=255` are raw bytes, so every string can be encoded and decoding
//! is always exact. The end-of-text token and the word table follow. Text is
//! pre-split into segments: an alphanumeric run (optionally carrying a single
//! leading space, GPT style) or a single other character. A segment that is
//! not in the table is emitted as its UTF-8 bytes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTE_TOKENS: u32 = 256;
pub const EOT_TEXT: &str = "<|endoftext|>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    /// id -> token string; byte tokens are stored as `<0xNN>`.
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    eot_id: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    eot_id: u32,
    vocab: HashMap<String, u32>,
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

/// Split text into lookup segments. Concatenating the segments gives back
/// the input exactly.
pub fn segments(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some((start, c)) = iter.next() {
        let word_start = if c.is_alphanumeric() {
            true
        } else if c == ' ' {
            matches!(iter.peek(), Some((_, n)) if n.is_alphanumeric())
        } else {
            false
        };
        if !word_start {
            out.push(&text[start..start + c.len_utf8()]);
            continue;
        }
        let mut end = start + c.len_utf8();
        while let Some(&(i, n)) = iter.peek() {
            if !n.is_alphanumeric() {
                break;
            }
            end = i + n.len_utf8();
            iter.next();
        }
        out.push(&text[start..end]);
    }
    out
}

impl Tokenizer {
    /// A tokenizer with only byte tokens and the end-of-text token.
    pub fn bytes_only() -> Self {
        Self::from_words(std::iter::empty::<String>())
    }

    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut tokens: Vec<String> = (0..=255u8).map(byte_token).collect();
        tokens.push(EOT_TEXT.to_string());
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len() as u32);
            tokens.push(w);
        }
        Tokenizer {
            tokens,
            index,
            eot_id: BYTE_TOKENS,
        }
    }

    /// Build a word table from the most frequent multi-byte segments of the
    /// given texts. Ties are broken lexicographically so the result only
    /// depends on the multiset of texts.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: usize, min_count: usize) -> Self {
        let mut counts: HashMap<&'a str, usize> = HashMap::new();
        for t in texts {
            for s in segments(t) {
                if s.len() > 1 {
                    *counts.entry(s).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_words);
        Self::from_words(ranked.into_iter().map(|(s, _)| s.to_string()))
    }

    pub fn vocab_size(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn eot_id(&self) -> u32 {
        self.eot_id
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn push_segment(&self, seg: &str, out: &mut Vec<u32>) {
        if let Some(&id) = self.index.get(seg) {
            if id >= BYTE_TOKENS && id != self.eot_id {
                out.push(id);
                return;
            }
        }
        if let Some(rest) = seg.strip_prefix(' ') {
            if !rest.is_empty() {
                out.push(b' ' as u32);
                self.push_segment(rest, out);
                return;
            }
        }
        out.extend(seg.bytes().map(u32::from));
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 3 + 1);
        for seg in segments(text) {
            self.push_segment(seg, &mut out);
        }
        out
    }

    /// Raw bytes of the decoded ids. The end-of-text token decodes to its
    /// textual marker.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if id < BYTE_TOKENS {
                out.push(id as u8);
                continue;
            }
            let tok = self.tokens.get(id as usize).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            out.extend_from_slice(tok.as_bytes());
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes)
            .map_err(|e| Error::InvalidArgument(format!("ids do not decode to valid UTF-8: {e}")))
    }

    /// Like [`decode`](Self::decode) but replaces invalid UTF-8, e.g. a
    /// character cut in half by truncation.
    pub fn decode_lossy(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            eot_id: self.eot_id,
            vocab: self.index.clone(),
        };
        let json = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Load a vocabulary table: `{"eot_id": N, "vocab": {"token": id, ...}}`.
    /// Ids must be dense and ids `0..=255` must be the byte tokens `<0x00>`..`<0xFF>`.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&raw)?;
        let n = file.vocab.len();
        let mut tokens = vec![None; n];
        for (tok, &id) in &file.vocab {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("vocab id {id} is not dense (size {n})")))?;
            if slot.is_some() {
                return Err(Error::Config(format!("duplicate vocab id {id}")));
            }
            *slot = Some(tok.clone());
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense ids")).collect();
        for b in 0..=255u8 {
            if tokens[b as usize] != byte_token(b) {
                return Err(Error::Config(format!("id {b} must be the byte token {}", byte_token(b))));
            }
        }
        if file.eot_id < BYTE_TOKENS || file.eot_id as usize >= n {
            return Err(Error::Config(format!("eot id {} out of range", file.eot_id)));
        }
        Ok(Tokenizer {
            tokens,
            index: file.vocab,
            eot_id: file.eot_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_encodes_to_nothing() {
        let tok = Tokenizer::from_words(["hello"]);
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
    }

    #[test]
    fn known_word_maps_to_registered_id() {
        let tok = Tokenizer::from_words(["hello", " world"]);
        let hello = tok.token_id("hello").unwrap();
        let world = tok.token_id(" world").unwrap();
        assert_eq!(hello, 257);
        assert_eq!(tok.encode("hello world"), vec![hello, world]);
    }

    #[test]
    fn unknown_text_falls_back_to_bytes() {
        let tok = Tokenizer::from_words(["cat"]);
        let ids = tok.encode("dog é");
        assert!(ids.iter().all(|&i| i < BYTE_TOKENS));
        assert_eq!(tok.decode(&ids).unwrap(), "dog é");
    }

    #[test]
    fn space_prefix_splits_when_only_bare_word_known() {
        let tok = Tokenizer::from_words(["cat"]);
        let cat = tok.token_id("cat").unwrap();
        assert_eq!(tok.encode("a cat"), vec![b'a' as u32, b' ' as u32, cat]);
    }

    #[test]
    fn segments_concatenate_to_input() {
        let s = "Hi  there,\n• item 2.\tx";
        assert_eq!(segments(s).concat(), s);
        assert_eq!(segments("a bc"), vec!["a", " bc"]);
    }

    #[test]
    fn out_of_range_id_is_an_error() {
        let tok = Tokenizer::bytes_only();
        assert!(matches!(tok.decode(&[9999]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn fit_is_frequency_ranked() {
        let tok = Tokenizer::fit(["b a b c b a b"], 10, 1);
        assert_eq!(tok.token_id(" b"), Some(257));
        assert_eq!(tok.token_id(" a"), Some(258));
        assert!(tok.token_id("a").is_none()); // single byte segments are not words
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        let tok = Tokenizer::fit(["the quick brown fox jumps over the lazy dog"], 100, 1);
        tok.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), tok);
    }
}
