use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// Summary of tokenized sequence lengths. The standard deviation is the
/// population form and mode ties go to the smaller length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub std_dev: f64,
    pub mode: usize,
    pub median: f64,
    pub min: usize,
    pub max: usize,
    pub range: usize,
    pub n_samples: usize,
}

pub fn length_stats(lengths: &[usize]) -> Result<LengthStats> {
    if lengths.is_empty() {
        return Err(Error::Empty("no sequences to compute statistics over"));
    }
    let n = lengths.len();
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let mean = sorted.iter().map(|&l| l as f64).sum::<f64>() / n as f64;
    let var = sorted.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    };
    // sorted ascending, so strict > keeps the smallest length among ties
    let (mut mode, mut best) = (sorted[0], 0usize);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > best {
            best = j - i;
            mode = sorted[i];
        }
        i = j;
    }
    let (min, max) = (sorted[0], sorted[n - 1]);
    Ok(LengthStats {
        mean,
        std_dev: var.sqrt(),
        mode,
        median,
        min,
        max,
        range: max - min,
        n_samples: n,
    })
}

pub fn token_lengths(corpus: &Corpus, tokenizer: &Tokenizer) -> Vec<usize> {
    corpus
        .sequences()
        .iter()
        .map(|s| tokenizer.encode(&s.text).len())
        .collect()
}

pub fn compute_length_stats(corpus: &Corpus, tokenizer: &Tokenizer) -> Result<LengthStats> {
    length_stats(&token_lengths(corpus, tokenizer))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bucket_width: usize,
    pub cap: usize,
    /// bucket index k counts lengths in `[k*w, (k+1)*w)`
    pub buckets: BTreeMap<usize, usize>,
    pub omitted: usize,
}

impl Histogram {
    pub fn from_lengths(lengths: &[usize], bucket_width: usize, cap: usize) -> Result<Self> {
        if bucket_width == 0 {
            return Err(Error::InvalidArgument("bucket width must be positive".into()));
        }
        let mut buckets = BTreeMap::new();
        let mut omitted = 0;
        for &l in lengths {
            if l > cap {
                omitted += 1;
            } else {
                *buckets.entry(l / bucket_width).or_default() += 1;
            }
        }
        Ok(Histogram {
            bucket_width,
            cap,
            buckets,
            omitted,
        })
    }

    pub fn total(&self) -> usize {
        self.buckets.values().sum::<usize>() + self.omitted
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("bucket\tcount\n");
        for (&k, &c) in &self.buckets {
            let _ = writeln!(out, "[{}, {})\t{c}", k * self.bucket_width, (k + 1) * self.bucket_width);
        }
        let _ = writeln!(out, "> {}\t{} (omitted)", self.cap, self.omitted);
        out
    }
}

pub fn emit_histogram(corpus: &Corpus, tokenizer: &Tokenizer, bucket_width: usize, cap: usize) -> Result<Histogram> {
    Histogram::from_lengths(&token_lengths(corpus, tokenizer), bucket_width, cap)
}

/// Plain-text table with one row per dataset.
pub fn stats_table(rows: &[(String, LengthStats)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(7);
    let mut out = format!(
        "{:<width$} | {:>10} | {:>13} | {:>8} | {:>10} | {:>10}\n",
        "Dataset", "Mean", "St. Deviation", "Mode", "Median", "Range"
    );
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:>10.0} | {:>13.0} | {:>8} | {:>10.0} | {:>10}",
            name, s.mean, s.std_dev, s.mode, s.median, s.range
        );
    }
    out
}
