//! First-token prompting, sampling from a language model, and mixture
//! estimation by classifying generated (or external) sequences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, TextSequence};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, TextClassifier};
use crate::model::{Scalar, Transformer};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenDistribution {
    pub source: String,
    pub counts: BTreeMap<u32, usize>,
    pub n_samples: usize,
}

impl FirstTokenDistribution {
    pub fn prob(&self, token: u32) -> f64 {
        self.counts.get(&token).map_or(0.0, |&c| c as f64 / self.n_samples as f64)
    }

    pub fn probs(&self) -> BTreeMap<u32, f64> {
        self.counts.keys().map(|&t| (t, self.prob(t))).collect()
    }

    fn sampler(&self) -> (Vec<u32>, WeightedIndex<usize>) {
        let ids: Vec<u32> = self.counts.keys().copied().collect();
        let w = WeightedIndex::new(self.counts.values().copied()).expect("non-empty, positive counts");
        (ids, w)
    }
}

pub fn first_token_distribution(corpus: &Corpus, tokenizer: &Tokenizer) -> Result<FirstTokenDistribution> {
    let firsts: Vec<Option<u32>> = corpus
        .sequences()
        .par_iter()
        .map(|s| tokenizer.encode(&s.text).first().copied())
        .collect();
    let mut counts = BTreeMap::new();
    for t in firsts.into_iter().flatten() {
        *counts.entry(t).or_insert(0) += 1;
    }
    let n_samples = counts.values().sum();
    if n_samples == 0 {
        return Err(Error::Empty("corpus for the first-token distribution"));
    }
    Ok(FirstTokenDistribution {
        source: corpus.name().to_string(),
        counts,
        n_samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub n: usize,
    /// Total length including the prompt token.
    pub max_len: usize,
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            n: 2048,
            max_len: 256,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetadata {
    pub lm_checksum: u64,
    pub dist_source: String,
    pub seed: u64,
    pub temperature: f64,
    pub max_len: usize,
    pub n: usize,
}

fn sample_logits<F: Scalar>(logits: &[F], limit: usize, temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let z: Vec<f64> = logits[..limit].iter().map(|x| x.to_f64().unwrap_or(f64::NEG_INFINITY)).collect();
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &x) in z.iter().enumerate() {
            if x > z[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = z.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let total: f64 = p.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &pi) in p.iter().enumerate() {
        if u < pi {
            return i as u32;
        }
        u -= pi;
    }
    (limit - 1) as u32
}

/// Token ids of one sampled sequence: a prompt token drawn from `dist`, then
/// model samples until end-of-text (excluded) or `max_len`.
pub fn generate_ids<F: Scalar>(
    lm: &Transformer<F>,
    tokenizer: &Tokenizer,
    dist: &FirstTokenDistribution,
    opts: &GenerateOptions,
    index: u64,
) -> Result<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index);
    let (ids, w) = dist.sampler();
    let first = ids[w.sample(&mut rng)];
    let limit = (tokenizer.vocab_size() as usize).min(lm.config.vocab_size);
    let mut out = vec![first];
    let mut state = lm.decode_state();
    let mut next = first;
    while out.len() < opts.max_len {
        let logits = lm.decode_step(&mut state, next)?;
        next = sample_logits(&logits, limit, opts.temperature, &mut rng);
        if next == tokenizer.eot_id() {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Sample `opts.n` sequences in parallel; sequence `i` uses stream `i` of
/// the master seed, so the output does not depend on scheduling.
pub fn generate_sequences<F: Scalar>(
    lm: &Transformer<F>,
    tokenizer: &Tokenizer,
    dist: &FirstTokenDistribution,
    opts: &GenerateOptions,
    label: &Label,
) -> Result<(Corpus, GenerationMetadata)> {
    if !lm.head_mode.is_lm() {
        return Err(Error::InvalidArgument("generation needs a language-model head".into()));
    }
    if opts.max_len == 0 || opts.max_len > lm.config.context_length {
        return Err(Error::InvalidArgument(format!(
            "max_len {} must be in 1..={}",
            opts.max_len, lm.config.context_length
        )));
    }
    if !(opts.temperature >= 0.0) {
        return Err(Error::InvalidArgument("temperature must be non-negative".into()));
    }
    if let Some((&t, _)) = dist.counts.range(tokenizer.vocab_size()..).next() {
        return Err(Error::TokenOutOfRange {
            id: t,
            vocab_size: tokenizer.vocab_size(),
        });
    }
    let seqs: Vec<Vec<u32>> = (0..opts.n as u64)
        .into_par_iter()
        .map(|i| generate_ids(lm, tokenizer, dist, opts, i))
        .collect::<Result<_>>()?;
    let mut corpus = Corpus::new(format!("generated-{}", label.name));
    corpus.register(label)?;
    for (i, ids) in seqs.iter().enumerate() {
        corpus.push(TextSequence {
            text: tokenizer.decode_lossy(ids)?,
            label: label.id,
            source_id: format!("gen:{i}"),
        })?;
    }
    let meta = GenerationMetadata {
        lm_checksum: lm.checksum(),
        dist_source: dist.source.clone(),
        seed: opts.seed,
        temperature: opts.temperature,
        max_len: opts.max_len,
        n: opts.n,
    };
    Ok((corpus, meta))
}

/// Write generated text as jsonl plus a `<path>.meta.json` sidecar.
pub fn write_generated(corpus: &Corpus, meta: &GenerationMetadata, path: &Path) -> Result<()> {
    corpus.write_jsonl(path)?;
    let side = path.with_extension("meta.json");
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, json).map_err(|e| Error::io(side, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEstimate {
    pub labels: Vec<u16>,
    pub names: Vec<String>,
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    /// `sqrt(p (1 - p) / n)`
    pub std_errors: Vec<f64>,
    pub n: usize,
}

impl MixtureEstimate {
    pub fn from_counts(classes: &[Label], counts: Vec<usize>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidArgument("a mixture needs at least two classes".into()));
        }
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(Error::Empty("sequences to classify"));
        }
        let proportions: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let std_errors = proportions.iter().map(|p| (p * (1.0 - p) / n as f64).sqrt()).collect();
        Ok(MixtureEstimate {
            labels: classes.iter().map(|l| l.id).collect(),
            names: classes.iter().map(|l| l.name.clone()).collect(),
            counts,
            proportions,
            std_errors,
            n,
        })
    }

    /// Horizontal bars in percent, with an optional reference column.
    pub fn to_table(&self, truth: Option<&[f64]>) -> String {
        let w = self.names.iter().map(|n| n.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        for (i, name) in self.names.iter().enumerate() {
            let pct = 100.0 * self.proportions[i];
            let bar = "#".repeat((pct / 2.0).round() as usize);
            s += &format!("{name:w$} | {pct:6.2}% ± {:4.2} ", 100.0 * self.std_errors[i]);
            if let Some(t) = truth {
                s += &format!("(true {:6.2}%) ", 100.0 * t[i]);
            }
            s += &format!("{bar}\n");
        }
        s += &format!("n = {}\n", self.n);
        s
    }
}

/// Classify every sequence whole and report class fractions.
pub fn estimate_mixture<C: TextClassifier + ?Sized>(clf: &C, classes: &[Label], sequences: &[String]) -> Result<MixtureEstimate> {
    let pos: BTreeMap<u16, usize> = classes.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
    let preds: Vec<u16> = sequences.par_iter().map(|t| clf.predict(t)).collect::<Result<_>>()?;
    let mut counts = vec![0usize; classes.len()];
    for p in preds {
        let i = pos
            .get(&p)
            .ok_or_else(|| Error::InvalidArgument(format!("classifier predicted unknown class {p}")))?;
        counts[*i] += 1;
    }
    MixtureEstimate::from_counts(classes, counts)
}

/// Whole-sequence evaluation of externally produced, labeled sequences.
pub fn classify_external<C: TextClassifier + ?Sized>(clf: &C, labeled: &Corpus) -> Result<EvalReport> {
    evaluate(clf, labeled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_token_frequencies() {
        let tok = Tokenizer::from_words([" a", "a", "b"]);
        let mut c = Corpus::new("x");
        c.register(&Label::new(0, "x")).unwrap();
        for t in ["a x", "a y", "b z"] {
            c.push(TextSequence {
                text: t.into(),
                label: 0,
                source_id: String::new(),
            })
            .unwrap();
        }
        let d = first_token_distribution(&c, &tok).unwrap();
        let a = tok.token_id("a").unwrap();
        let b = tok.token_id("b").unwrap();
        assert!((d.prob(a) - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.prob(b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((d.probs().values().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixture_from_counts() {
        let cls = [Label::new(0, "A"), Label::new(1, "B")];
        let m = MixtureEstimate::from_counts(&cls, vec![2, 2]).unwrap();
        assert_eq!(m.proportions, vec![0.5, 0.5]);
        assert!((m.std_errors[0] - (0.25f64 / 4.0).sqrt()).abs() < 1e-15);
        assert!(MixtureEstimate::from_counts(&cls[..1], vec![1]).is_err());
    }
}
