//! Synthetic biased domains for desk-scale experiments.
//!
//! A document is a run of sentences. Each sentence draws words from the
//! domain's unigram distribution, or, with `phrase_rate`, inserts one of the
//! domain's fixed multi-word phrases. Two domains can share a unigram
//! distribution and still differ in word order through their phrases.
//! Sentences end with a period and are joined by a space or, with
//! `newline_rate`, a newline; with `bullet_rate` a sentence starts with a
//! bullet marker.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use super::{Corpus, Label, TextSequence};
use crate::error::{Error, Result};

pub const BULLET: &str = "•";

/// Document length in words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LengthDist {
    Fixed { words: usize },
    Uniform { min: usize, max: usize },
    LogNormal { median: f64, sigma: f64, min: usize, max: usize },
}

impl LengthDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LengthDist::Fixed { words } => words > 0,
            LengthDist::Uniform { min, max } => min > 0 && min <= max,
            LengthDist::LogNormal { median, sigma, min, max } => {
                median > 0.0 && sigma >= 0.0 && sigma.is_finite() && min > 0 && min <= max
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid length distribution {self:?}")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            LengthDist::Fixed { words } => words,
            LengthDist::Uniform { min, max } => rng.gen_range(min..=max),
            LengthDist::LogNormal { median, sigma, min, max } => {
                let d = LogNormal::new(median.ln(), sigma).expect("validated");
                (d.sample(rng).round() as usize).clamp(min, max)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub words: Vec<String>,
    pub vocab_weights: Vec<f64>,
    pub newline_rate: f64,
    pub bullet_rate: f64,
    pub length: LengthDist,
    /// inclusive bounds on words per sentence
    pub sentence_len: (usize, usize),
    #[serde(default)]
    pub phrases: Vec<Vec<String>>,
    #[serde(default)]
    pub phrase_rate: f64,
    pub seed: u64,
}

impl SyntheticDomainSpec {
    /// Uniform weights over `words`, no formatting, no phrases.
    pub fn uniform(name: impl Into<String>, words: Vec<String>, length: LengthDist, seed: u64) -> Self {
        let n = words.len().max(1);
        SyntheticDomainSpec {
            name: name.into(),
            vocab_weights: vec![1.0 / n as f64; words.len()],
            words,
            newline_rate: 0.0,
            bullet_rate: 0.0,
            length,
            sentence_len: (4, 12),
            phrases: Vec::new(),
            phrase_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.words.is_empty() {
            return bad("empty word list".into());
        }
        if self.words.len() != self.vocab_weights.len() {
            return bad(format!(
                "{} words but {} weights",
                self.words.len(),
                self.vocab_weights.len()
            ));
        }
        if let Some(w) = self.words.iter().find(|w| w.is_empty() || w.chars().any(|c| !c.is_alphanumeric())) {
            return bad(format!("word {w:?} must be a non-empty alphanumeric string"));
        }
        if self.vocab_weights.iter().any(|&p| !(0.0..=1.0).contains(&p) || p.is_nan()) {
            return bad("vocabulary weights must lie in [0, 1]".into());
        }
        let total: f64 = self.vocab_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("vocabulary weights sum to {total}, not 1"));
        }
        for (name, p) in [
            ("newline_rate", self.newline_rate),
            ("bullet_rate", self.bullet_rate),
            ("phrase_rate", self.phrase_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.phrase_rate > 0.0 && self.phrases.iter().all(|p| p.is_empty()) {
            return bad("phrase_rate > 0 needs at least one non-empty phrase".into());
        }
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            return bad(format!("invalid sentence length bounds ({lo}, {hi})"));
        }
        self.length.validate()
    }
}

/// Generate `n` documents, labeled with `label`.
pub fn generate_synthetic_corpus(spec: &SyntheticDomainSpec, label: &Label, n: usize) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unigram = WeightedIndex::new(&spec.vocab_weights)
        .map_err(|e| Error::InvalidArgument(format!("vocabulary weights: {e}")))?;
    let phrases: Vec<&Vec<String>> = spec.phrases.iter().filter(|p| !p.is_empty()).collect();
    let mut corpus = Corpus::new(spec.name.clone());
    corpus.register(label)?;
    for i in 0..n {
        let target = spec.length.sample(&mut rng);
        let mut text = String::new();
        let mut words = 0;
        while words < target {
            if !text.is_empty() {
                text.push(if rng.gen_bool(spec.newline_rate) { '\n' } else { ' ' });
            }
            if rng.gen_bool(spec.bullet_rate) {
                text.push_str(BULLET);
                text.push(' ');
            }
            let len = rng.gen_range(spec.sentence_len.0..=spec.sentence_len.1);
            let mut in_sentence = 0;
            while in_sentence < len {
                if in_sentence > 0 {
                    text.push(' ');
                }
                if !phrases.is_empty() && rng.gen_bool(spec.phrase_rate) {
                    let p = phrases[rng.gen_range(0..phrases.len())];
                    text.push_str(&p.join(" "));
                    in_sentence += p.len();
                } else {
                    text.push_str(&spec.words[unigram.sample(&mut rng)]);
                    in_sentence += 1;
                }
            }
            text.push('.');
            words += in_sentence;
        }
        corpus.push(TextSequence {
            text,
            label: label.id,
            source_id: format!("{}:{i}", spec.name),
        })?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn full_bullet_rate_marks_every_sentence() {
        let mut spec = SyntheticDomainSpec::uniform("b", words("w", 10), LengthDist::Uniform { min: 10, max: 40 }, 1);
        spec.bullet_rate = 1.0;
        spec.newline_rate = 0.5;
        let c = generate_synthetic_corpus(&spec, &Label::new(0, "b"), 50).unwrap();
        for s in c.sequences() {
            for sentence in s.text.split_inclusive('.') {
                let sentence = sentence.trim_start();
                assert!(sentence.starts_with("• "), "{sentence:?}");
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticDomainSpec::uniform("d", words("w", 5), LengthDist::Fixed { words: 20 }, 9);
        let l = Label::new(0, "d");
        assert_eq!(
            generate_synthetic_corpus(&spec, &l, 5).unwrap(),
            generate_synthetic_corpus(&spec, &l, 5).unwrap()
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SyntheticDomainSpec::uniform("d", words("w", 5), LengthDist::Fixed { words: 20 }, 9);
        spec.vocab_weights[0] += 0.1;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticDomainSpec::uniform("d", words("w", 5), LengthDist::Fixed { words: 20 }, 9);
        spec.newline_rate = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticDomainSpec::uniform("d", vec!["two words".into()], LengthDist::Fixed { words: 2 }, 9);
        assert!(spec.validate().is_err());
        spec.words = vec!["ok".into()];
        spec.length = LengthDist::Uniform { min: 5, max: 2 };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn length_follows_word_budget() {
        let spec = SyntheticDomainSpec::uniform("d", words("w", 5), LengthDist::Fixed { words: 30 }, 2);
        let c = generate_synthetic_corpus(&spec, &Label::new(0, "d"), 20).unwrap();
        for s in c.sequences() {
            let n = s.text.split_whitespace().count();
            assert!((30..30 + 12).contains(&n), "{n}");
        }
    }
}
