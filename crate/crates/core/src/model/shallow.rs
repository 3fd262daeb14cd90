//! Shallow averaged-embedding classifier in the FastText style.
//!
//! Input tokens are whitespace-separated units (a newline becomes the
//! `</s>` token). Features are the in-vocabulary tokens plus hashed word
//! n-grams of order 2..=`n_gram_order`. The document vector is the mean of
//! the feature embeddings and a linear layer maps it to class scores.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bow::{argmax, class_list, softmax_in_place};
use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const NEWLINE_TOKEN: &str = "</s>";

pub fn shallow_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push(NEWLINE_TOKEN.to_string());
        }
        out.extend(line.split_whitespace().map(str::to_string));
    }
    out
}

/// FNV-1a over the n-gram's tokens, separated by a zero byte.
fn ngram_hash(tokens: &[String]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.bytes().chain(std::iter::once(0u8)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowHyper {
    pub dim: usize,
    pub n_gram_order: usize,
    pub bucket_count: usize,
    pub max_vocab: usize,
    pub min_count: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ShallowHyper {
    fn default() -> Self {
        ShallowHyper {
            dim: 64,
            n_gram_order: 2,
            bucket_count: 2_000_000,
            max_vocab: 200_000,
            min_count: 1,
            epochs: 5,
            lr: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowModel {
    pub vocab_index: HashMap<String, usize>,
    pub classes: Vec<u16>,
    pub dim: usize,
    pub n_gram_order: usize,
    pub bucket_count: usize,
    /// `(vocab + buckets) × dim` input embeddings
    pub embeddings: Vec<f32>,
    /// `n_classes × dim`
    pub output: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ShallowModel {
    /// Embedding rows used by a document: word ids, then n-gram buckets.
    pub fn features(&self, text: &str) -> Vec<usize> {
        let toks = shallow_tokens(text);
        let v = self.vocab_index.len();
        let mut out: Vec<usize> = toks.iter().filter_map(|t| self.vocab_index.get(t).copied()).collect();
        if self.bucket_count > 0 {
            for n in 2..=self.n_gram_order {
                for w in toks.windows(n) {
                    out.push(v + (ngram_hash(w) % self.bucket_count as u64) as usize);
                }
            }
        }
        // the mean is order-free; sorting makes the float sum order-free too
        out.sort_unstable();
        out
    }

    fn hidden(&self, feats: &[usize]) -> Vec<f32> {
        let mut h = vec![0.0f32; self.dim];
        if feats.is_empty() {
            return h;
        }
        for &f in feats {
            let row = &self.embeddings[f * self.dim..(f + 1) * self.dim];
            for (a, &b) in h.iter_mut().zip(row) {
                *a += b;
            }
        }
        let inv = 1.0 / feats.len() as f32;
        h.iter_mut().for_each(|a| *a *= inv);
        h
    }

    pub fn scores(&self, text: &str) -> Vec<f64> {
        let h = self.hidden(&self.features(text));
        self.scores_from_hidden(&h)
    }

    fn scores_from_hidden(&self, h: &[f32]) -> Vec<f64> {
        (0..self.classes.len())
            .map(|k| {
                let w = &self.output[k * self.dim..(k + 1) * self.dim];
                (self.bias[k] + w.iter().zip(h).map(|(&a, &b)| a * b).sum::<f32>()) as f64
            })
            .collect()
    }
}

/// SGD with a linearly decaying learning rate, one document per step.
pub fn shallow_train(corpus: &Corpus, hyper: &ShallowHyper) -> Result<ShallowModel> {
    if hyper.dim == 0 || hyper.n_gram_order == 0 {
        return Err(Error::InvalidArgument("dim and n_gram_order must be positive".into()));
    }
    if hyper.n_gram_order > 1 && hyper.bucket_count == 0 {
        return Err(Error::InvalidArgument("n-grams need a positive bucket count".into()));
    }
    let classes = class_list(corpus)?;
    let class_of: HashMap<u16, usize> = classes.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in corpus.sequences() {
        for t in shallow_tokens(&s.text) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= hyper.min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(hyper.max_vocab);
    let vocab_index: HashMap<String, usize> = ranked.into_iter().enumerate().map(|(i, (w, _))| (w, i)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let bucket_count = if hyper.n_gram_order > 1 { hyper.bucket_count } else { 0 };
    let rows = vocab_index.len() + bucket_count;
    let bound = 1.0 / hyper.dim as f32;
    let embeddings: Vec<f32> = (0..rows * hyper.dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let k = classes.len();
    let mut model = ShallowModel {
        vocab_index,
        classes,
        dim: hyper.dim,
        n_gram_order: hyper.n_gram_order,
        bucket_count,
        embeddings,
        output: vec![0.0; k * hyper.dim],
        bias: vec![0.0; k],
    };
    let data: Vec<(Vec<usize>, usize)> = corpus
        .sequences()
        .iter()
        .map(|s| (model.features(&s.text), class_of[&s.label]))
        .collect();
    let total_steps = (hyper.epochs * data.len()).max(1) as f64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    let dim = hyper.dim;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let lr = (hyper.lr * (1.0 - step as f64 / total_steps)) as f32;
            step += 1;
            let (feats, y) = &data[i];
            if feats.is_empty() {
                continue;
            }
            let h = model.hidden(feats);
            let mut p = model.scores_from_hidden(&h);
            softmax_in_place(&mut p);
            p[*y] -= 1.0;
            let mut dh = vec![0.0f32; dim];
            for c in 0..k {
                let e = p[c] as f32;
                let w = &mut model.output[c * dim..(c + 1) * dim];
                for j in 0..dim {
                    dh[j] += e * w[j];
                    w[j] -= lr * e * h[j];
                }
                model.bias[c] -= lr * e;
            }
            let scale = lr / feats.len() as f32;
            for &f in feats {
                let row = &mut model.embeddings[f * dim..(f + 1) * dim];
                for j in 0..dim {
                    row[j] -= scale * dh[j];
                }
            }
        }
    }
    Ok(model)
}

pub fn shallow_predict(model: &ShallowModel, text: &str) -> u16 {
    model.classes[argmax(&model.scores(text))]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, TextSequence};

    #[test]
    fn newline_is_a_token() {
        assert_eq!(shallow_tokens("a b\nc"), vec!["a", "b", NEWLINE_TOKEN, "c"]);
    }

    fn two_class() -> Corpus {
        let mut c = Corpus::new("x");
        c.register(&Label::new(0, "a")).unwrap();
        c.register(&Label::new(1, "b")).unwrap();
        for i in 0..60 {
            // same words, different order
            let (text, label) = if i % 2 == 0 { ("red dog. blue cat.", 0) } else { ("dog red. cat blue.", 1) };
            c.push(TextSequence {
                text: text.into(),
                label,
                source_id: String::new(),
            })
            .unwrap();
        }
        c
    }

    #[test]
    fn bigrams_separate_word_order() {
        let h = ShallowHyper {
            bucket_count: 1 << 12,
            epochs: 20,
            dim: 16,
            lr: 0.5,
            ..Default::default()
        };
        let m = shallow_train(&two_class(), &h).unwrap();
        assert_eq!(shallow_predict(&m, "red dog. blue cat."), 0);
        assert_eq!(shallow_predict(&m, "dog red. cat blue."), 1);
    }

    #[test]
    fn unigram_model_ignores_order() {
        let h = ShallowHyper {
            n_gram_order: 1,
            dim: 8,
            epochs: 3,
            ..Default::default()
        };
        let m = shallow_train(&two_class(), &h).unwrap();
        assert_eq!(m.bucket_count, 0);
        assert_eq!(m.scores("red dog. blue cat."), m.scores("blue cat. red dog."));
    }
}
