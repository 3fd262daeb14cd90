//! Ready-made synthetic benchmarks built from [`SyntheticDomainSpec`]s.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{generate_synthetic_corpus, LengthDist, SyntheticDomainSpec};
use super::{Corpus, Label};
use crate::error::{Error, Result};

/// Pronounceable pseudo-words: consonant-vowel syllables.
pub fn pseudo_words(n: usize, seed: u64) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syl = rng.gen_range(2..=3);
        let w: String = (0..syl)
            .flat_map(|_| [C[rng.gen_range(0..C.len())] as char, V[rng.gen_range(0..V.len())] as char])
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Domains with pairwise disjoint vocabularies and uniform word weights.
pub fn separable_domains(n_domains: usize, words_per_domain: usize, length: LengthDist, seed: u64) -> Vec<SyntheticDomainSpec> {
    let all = pseudo_words(n_domains * words_per_domain, seed);
    all.chunks(words_per_domain)
        .enumerate()
        .map(|(i, ws)| SyntheticDomainSpec::uniform(format!("sep{i}"), ws.to_vec(), length.clone(), seed.wrapping_add(1 + i as u64)))
        .collect()
}

/// Strength of each bias channel in [`subtle_bias_domains`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubtleBias {
    pub vocab_size: usize,
    /// Spread of the per-domain log-weight perturbation of a shared Zipf
    /// distribution.
    pub unigram_shift: f64,
    /// Extra newline (domain 0) or bullet (domain 1) rate.
    pub format_rate: f64,
    /// Rate of word-order phrases; every domain uses the same words in a
    /// domain-specific order.
    pub phrase_rate: f64,
    pub median_words: f64,
    pub max_words: usize,
}

impl Default for SubtleBias {
    fn default() -> Self {
        SubtleBias {
            vocab_size: 150,
            unigram_shift: 0.25,
            format_rate: 0.15,
            phrase_rate: 0.04,
            median_words: 40.0,
            max_words: 160,
        }
    }
}

/// Three domains over one shared vocabulary. They differ mildly in word
/// frequencies, in layout (newlines, bullets) and in the order of words
/// inside recurring phrases.
pub fn subtle_bias_domains(bias: &SubtleBias, seed: u64) -> Result<Vec<SyntheticDomainSpec>> {
    if bias.vocab_size < 12 {
        return Err(Error::InvalidArgument("subtle-bias benchmark needs at least 12 words".into()));
    }
    let words = pseudo_words(bias.vocab_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let zipf: Vec<f64> = (1..=words.len()).map(|r| 1.0 / r as f64).collect();
    // phrase templates: triples of shared words
    let mut pool: Vec<usize> = (0..words.len()).collect();
    pool.shuffle(&mut rng);
    let triples: Vec<[usize; 3]> = pool.chunks_exact(3).take(4).map(|c| [c[0], c[1], c[2]]).collect();
    let orders: [[usize; 3]; 3] = [[0, 1, 2], [2, 1, 0], [1, 2, 0]];
    let length = LengthDist::LogNormal {
        median: bias.median_words,
        sigma: 0.7,
        min: 4,
        max: bias.max_words,
    };
    let mut specs = Vec::new();
    for d in 0..3 {
        let mut w: Vec<f64> = zipf
            .iter()
            .map(|z| z * (bias.unigram_shift * rng.gen_range(-1.0..1.0f64)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let fix: f64 = 1.0 - w.iter().sum::<f64>();
        w[0] += fix;
        let phrases = triples
            .iter()
            .map(|t| orders[d].iter().map(|&k| words[t[k]].clone()).collect())
            .collect();
        specs.push(SyntheticDomainSpec {
            name: format!("subtle{d}"),
            words: words.clone(),
            vocab_weights: w,
            newline_rate: if d == 0 { bias.format_rate } else { 0.02 },
            bullet_rate: if d == 1 { bias.format_rate } else { 0.02 },
            length: length.clone(),
            sentence_len: (4, 12),
            phrases,
            phrase_rate: bias.phrase_rate,
            seed: seed.wrapping_mul(31).wrapping_add(d as u64 + 1),
        });
    }
    Ok(specs)
}

/// Generate `n_train + n_test` documents per domain (labels `0..k` in spec
/// order) and split them.
pub fn build_benchmark(specs: &[SyntheticDomainSpec], n_train: usize, n_test: usize) -> Result<(Corpus, Corpus)> {
    let mut train_parts = Vec::new();
    let mut test_parts = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let c = generate_synthetic_corpus(s, &Label::new(i as u16, s.name.clone()), n_train + n_test)?;
        let (tr, te) = c.split_per_label(n_train);
        train_parts.push(tr);
        test_parts.push(te);
    }
    let train = Corpus::merge("train", &train_parts.iter().collect::<Vec<_>>())?;
    let test = Corpus::merge("test", &test_parts.iter().collect::<Vec<_>>())?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_words_are_unique_and_alphanumeric() {
        let w = pseudo_words(500, 1);
        let set: std::collections::HashSet<_> = w.iter().collect();
        assert_eq!(set.len(), 500);
        assert!(w.iter().all(|x| x.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn subtle_specs_validate_and_share_words() {
        let specs = subtle_bias_domains(&SubtleBias::default(), 3).unwrap();
        assert_eq!(specs.len(), 3);
        for s in &specs {
            s.validate().unwrap();
            assert_eq!(s.words, specs[0].words);
        }
    }

    #[test]
    fn benchmark_split_is_balanced() {
        let specs = separable_domains(3, 20, LengthDist::Fixed { words: 10 }, 0);
        let (tr, te) = build_benchmark(&specs, 5, 2).unwrap();
        assert_eq!(tr.manifest().values().copied().collect::<Vec<_>>(), vec![5, 5, 5]);
        assert_eq!(te.manifest().values().copied().collect::<Vec<_>>(), vec![2, 2, 2]);
    }
}
