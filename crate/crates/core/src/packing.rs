//! Sequence packing and the on-disk shard format.
//!
//! Every sequence of one dataset is followed by the end-of-text token and
//! the concatenated stream is cut into non-overlapping rows of
//! `context_length + 1` ids. A trailing partial row is dropped.
//!
//! Shard layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DSCS"
//! 4       2     version (u16) = 1
//! 6       4     context_length (u32)
//! 10      4     vocab_size (u32)
//! 14      2     label (u16)
//! 16      4     row_count (u32)
//! 20      4*R*(C+1)  payload, row-major u32 token ids
//! end-8   8     CRC-64/XZ over every preceding byte (u64)
//! ```
//!
//! A shard with fewer than `rows_per_shard` rows is a trailing partial shard;
//! its row count is the flag.

use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

pub const SHARD_MAGIC: [u8; 4] = *b"DSCS";
pub const SHARD_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;
pub const CHECKSUM_LEN: usize = 8;
pub const DEFAULT_CONTEXT_LENGTH: usize = 2048;
pub const DEFAULT_ROWS_PER_SHARD: usize = 8192;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedRow {
    pub tokens: Vec<u32>,
    pub label: u16,
}

impl PackedRow {
    /// Inputs for next-token prediction and for classification.
    pub fn inputs(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets, shifted by one.
    pub fn targets(&self) -> &[u32] {
        &self.tokens[1..]
    }
}

/// Incremental packer for one label's token stream.
#[derive(Debug)]
pub struct Packer {
    row_len: usize,
    eot_id: u32,
    vocab_size: u32,
    label: u16,
    buf: Vec<u32>,
    total_tokens: usize,
    rows_emitted: usize,
}

impl Packer {
    pub fn new(context_length: usize, eot_id: u32, vocab_size: u32, label: u16) -> Result<Self> {
        if context_length == 0 {
            return Err(Error::InvalidArgument("context length must be positive".into()));
        }
        if eot_id >= vocab_size {
            return Err(Error::TokenOutOfRange { id: eot_id, vocab_size });
        }
        Ok(Packer {
            row_len: context_length + 1,
            eot_id,
            vocab_size,
            label,
            buf: Vec::with_capacity(2 * (context_length + 1)),
            total_tokens: 0,
            rows_emitted: 0,
        })
    }

    /// Append one sequence plus end-of-text; returns the rows completed by it.
    pub fn push(&mut self, seq: &[u32]) -> Result<Vec<PackedRow>> {
        if let Some(&id) = seq.iter().find(|&&id| id >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size,
            });
        }
        self.buf.extend_from_slice(seq);
        self.buf.push(self.eot_id);
        self.total_tokens += seq.len() + 1;
        let n_full = self.buf.len() / self.row_len;
        let rows: Vec<PackedRow> = self
            .buf
            .chunks_exact(self.row_len)
            .take(n_full)
            .map(|c| PackedRow {
                tokens: c.to_vec(),
                label: self.label,
            })
            .collect();
        self.buf.drain(..n_full * self.row_len);
        self.rows_emitted += rows.len();
        Ok(rows)
    }

    /// Number of tokens left in the partial row, which are dropped.
    pub fn finish(self) -> PackSummary {
        PackSummary {
            rows: self.rows_emitted,
            dropped_tokens: self.buf.len(),
            total_tokens: self.total_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackSummary {
    pub rows: usize,
    pub dropped_tokens: usize,
    pub total_tokens: usize,
}

/// Pack a same-label set of token sequences into rows.
pub fn pack_stream<S: AsRef<[u32]>>(
    sequences: &[S],
    context_length: usize,
    eot_id: u32,
    vocab_size: u32,
    label: u16,
) -> Result<(Vec<PackedRow>, PackSummary)> {
    let mut packer = Packer::new(context_length, eot_id, vocab_size, label)?;
    let mut rows = Vec::new();
    for s in sequences {
        rows.extend(packer.push(s.as_ref())?);
    }
    Ok((rows, packer.finish()))
}

/// Encode and truncate a test sequence. No end-of-text is appended.
pub fn prepare_test_sequence(tokenizer: &Tokenizer, text: &str, context_length: usize) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(Error::Empty("test sequence text"));
    }
    let mut ids = tokenizer.encode(text);
    ids.truncate(context_length);
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub version: u16,
    pub context_length: u32,
    pub vocab_size: u32,
    pub label: u16,
    pub row_count: u32,
}

impl ShardHeader {
    pub fn row_len(&self) -> usize {
        self.context_length as usize + 1
    }

    pub fn file_len(&self) -> usize {
        HEADER_LEN + self.row_count as usize * self.row_len() * 4 + CHECKSUM_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub header: ShardHeader,
    /// row-major, `row_count * (context_length + 1)` ids
    tokens: Vec<u32>,
}

impl Shard {
    pub fn from_rows(rows: &[PackedRow], context_length: usize, vocab_size: u32) -> Result<Self> {
        let label = rows.first().map(|r| r.label).unwrap_or(0);
        let mut tokens = Vec::with_capacity(rows.len() * (context_length + 1));
        for r in rows {
            if r.label != label {
                return Err(Error::InvalidArgument("a shard holds rows of a single label".into()));
            }
            if r.tokens.len() != context_length + 1 {
                return Err(Error::Shape(format!(
                    "row of length {} in a shard with context length {context_length}",
                    r.tokens.len()
                )));
            }
            if let Some(&id) = r.tokens.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::TokenOutOfRange { id, vocab_size });
            }
            tokens.extend_from_slice(&r.tokens);
        }
        Ok(Shard {
            header: ShardHeader {
                version: SHARD_VERSION,
                context_length: context_length as u32,
                vocab_size,
                label,
                row_count: rows.len() as u32,
            },
            tokens,
        })
    }

    pub fn row_count(&self) -> usize {
        self.header.row_count as usize
    }

    pub fn is_partial(&self, rows_per_shard: usize) -> bool {
        self.row_count() < rows_per_shard
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let l = self.header.row_len();
        &self.tokens[i * l..(i + 1) * l]
    }

    pub fn rows(&self) -> impl Iterator<Item = PackedRow> + '_ {
        let label = self.header.label;
        self.tokens
            .chunks_exact(self.header.row_len())
            .map(move |c| PackedRow {
                tokens: c.to_vec(),
                label,
            })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.file_len());
        out.extend_from_slice(&SHARD_MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&h.context_length.to_le_bytes());
        out.extend_from_slice(&h.vocab_size.to_le_bytes());
        out.extend_from_slice(&h.label.to_le_bytes());
        out.extend_from_slice(&h.row_count.to_le_bytes());
        for &t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(Error::Shape(format!("shard of {} bytes is too short", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let expected = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let actual = checksum(body);
        if expected != actual {
            return Err(Error::Checksum { expected, actual });
        }
        if body[..4] != SHARD_MAGIC {
            return Err(Error::Magic);
        }
        let u16_at = |o: usize| u16::from_le_bytes([body[o], body[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
        let version = u16_at(4);
        if version != SHARD_VERSION {
            return Err(Error::Version {
                found: version,
                expected: SHARD_VERSION,
            });
        }
        let header = ShardHeader {
            version,
            context_length: u32_at(6),
            vocab_size: u32_at(10),
            label: u16_at(14),
            row_count: u32_at(16),
        };
        if header.file_len() != bytes.len() {
            return Err(Error::Shape(format!(
                "header implies {} bytes, file has {}",
                header.file_len(),
                bytes.len()
            )));
        }
        let tokens: Vec<u32> = body[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(&id) = tokens.iter().find(|&&id| id >= header.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: header.vocab_size,
            });
        }
        Ok(Shard { header, tokens })
    }
}

/// Write a shard; returns its checksum.
pub fn write_shard(shard: &Shard, path: &Path) -> Result<u64> {
    let bytes = shard.to_bytes();
    let sum = u64::from_le_bytes(bytes[bytes.len() - CHECKSUM_LEN..].try_into().expect("8 bytes"));
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sum)
}

pub fn read_shard(path: &Path) -> Result<Shard> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Shard::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub path: PathBuf,
    pub label: u16,
    pub rows: usize,
    pub partial: bool,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackReport {
    pub shards: Vec<ShardInfo>,
    pub per_label: Vec<(u16, PackSummary)>,
}

/// Tokenize a corpus and pack each label into in-memory shards of at most
/// `rows_per_shard` rows.
pub fn pack_to_shards(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    context_length: usize,
    rows_per_shard: usize,
) -> Result<(Vec<Shard>, Vec<(u16, PackSummary)>)> {
    if rows_per_shard == 0 {
        return Err(Error::InvalidArgument("rows per shard must be positive".into()));
    }
    let mut shards = Vec::new();
    let mut summaries = Vec::new();
    for label in corpus.manifest().keys().copied() {
        let encoded: Vec<Vec<u32>> = corpus
            .sequences()
            .par_iter()
            .filter(|s| s.label == label)
            .map(|s| tokenizer.encode(&s.text))
            .collect();
        let (rows, summary) = pack_stream(&encoded, context_length, tokenizer.eot_id(), tokenizer.vocab_size(), label)?;
        for chunk in rows.chunks(rows_per_shard) {
            shards.push(Shard::from_rows(chunk, context_length, tokenizer.vocab_size())?);
        }
        summaries.push((label, summary));
    }
    Ok((shards, summaries))
}

/// Tokenize a corpus and write one shard series per label into `out_dir`
/// as `label{L}-{index:05}.shard`.
pub fn pack_corpus(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    context_length: usize,
    rows_per_shard: usize,
    out_dir: &Path,
) -> Result<PackReport> {
    let (shards, per_label) = pack_to_shards(corpus, tokenizer, context_length, rows_per_shard)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = PackReport {
        shards: Vec::new(),
        per_label,
    };
    let mut index: std::collections::BTreeMap<u16, usize> = Default::default();
    for shard in shards {
        let label = shard.header.label;
        let i = index.entry(label).or_default();
        let path = out_dir.join(format!("label{label}-{i:05}.shard"));
        *i += 1;
        let checksum = write_shard(&shard, &path)?;
        report.shards.push(ShardInfo {
            path,
            label,
            rows: shard.row_count(),
            partial: shard.is_partial(rows_per_shard),
            checksum,
        });
    }
    Ok(report)
}
