//! Bag-of-words classifier: multinomial logistic regression over raw word
//! counts.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

/// Words are maximal alphanumeric runs, lowercased. Punctuation and layout
/// characters are not words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Sparse count vector, sorted by column.
pub type SparseVec = Vec<(usize, f64)>;

/// Counts of every in-vocabulary word. Word order does not enter the result.
pub fn bow_featurize(text: &str, vocab_index: &HashMap<String, usize>) -> SparseVec {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for w in words(text) {
        if let Some(&col) = vocab_index.get(&w) {
            *counts.entry(col).or_default() += 1.0;
        }
    }
    counts.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowHyper {
    pub max_vocab: usize,
    pub min_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BowHyper {
    fn default() -> Self {
        BowHyper {
            max_vocab: 50_000,
            min_count: 1,
            epochs: 10,
            batch_size: 32,
            lr: 0.02,
            l2: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowModel {
    pub vocab_index: HashMap<String, usize>,
    /// class index -> dataset label
    pub classes: Vec<u16>,
    /// `n_classes × vocab_size`, row-major
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl BowModel {
    pub fn vocab_size(&self) -> usize {
        self.vocab_index.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn scores(&self, x: &SparseVec) -> Vec<f64> {
        let v = self.vocab_size();
        (0..self.n_classes())
            .map(|k| self.bias[k] + x.iter().map(|&(j, c)| self.weights[k * v + j] * c).sum::<f64>())
            .collect()
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn class_list(corpus: &Corpus) -> Result<Vec<u16>> {
    let classes: Vec<u16> = corpus
        .manifest()
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&l, _)| l)
        .collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least two classes with examples, got {}",
            classes.len()
        )));
    }
    Ok(classes)
}

pub fn build_vocab(corpus: &Corpus, max_vocab: usize, min_count: usize) -> HashMap<String, usize> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in corpus.sequences() {
        for w in words(&s.text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab);
    ranked.into_iter().enumerate().map(|(i, (w, _))| (w, i)).collect()
}

/// Mini-batch Adam on the mean cross-entropy with L2 regularization.
pub fn bow_train(corpus: &Corpus, hyper: &BowHyper) -> Result<BowModel> {
    let classes = class_list(corpus)?;
    let class_of: HashMap<u16, usize> = classes.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let vocab_index = build_vocab(corpus, hyper.max_vocab, hyper.min_count);
    let v = vocab_index.len();
    let k = classes.len();
    let data: Vec<(SparseVec, usize)> = corpus
        .sequences()
        .iter()
        .map(|s| (bow_featurize(&s.text, &vocab_index), class_of[&s.label]))
        .collect();
    let mut model = BowModel {
        vocab_index,
        classes,
        weights: vec![0.0; k * v],
        bias: vec![0.0; k],
    };
    let n_par = k * v + k;
    let (mut m, mut s) = (vec![0.0; n_par], vec![0.0; n_par]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut step = 0i32;
    let mut grad = vec![0.0; n_par];
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = &data[i];
                let mut p = model.scores(x);
                softmax_in_place(&mut p);
                p[*y] -= 1.0;
                for c in 0..k {
                    let e = p[c] * inv;
                    grad[k * v + c] += e;
                    for &(j, cnt) in x {
                        grad[c * v + j] += e * cnt;
                    }
                }
            }
            step += 1;
            let (bc1, bc2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for idx in 0..n_par {
                let param = if idx < k * v {
                    &mut model.weights[idx]
                } else {
                    &mut model.bias[idx - k * v]
                };
                let g = grad[idx] + if idx < k * v { hyper.l2 * *param } else { 0.0 };
                m[idx] = b1 * m[idx] + (1.0 - b1) * g;
                s[idx] = b2 * s[idx] + (1.0 - b2) * g * g;
                *param -= hyper.lr * (m[idx] / bc1) / ((s[idx] / bc2).sqrt() + eps);
            }
        }
    }
    Ok(model)
}

pub fn bow_predict(model: &BowModel, text: &str) -> u16 {
    let x = bow_featurize(text, &model.vocab_index);
    model.classes[argmax(&model.scores(&x))]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, TextSequence};

    fn vocab(ws: &[&str]) -> HashMap<String, usize> {
        ws.iter().enumerate().map(|(i, w)| (w.to_string(), i)).collect()
    }

    #[test]
    fn word_order_does_not_matter() {
        let v = vocab(&["i", "like", "apples", "but", "not", "bananas"]);
        assert_eq!(
            bow_featurize("I like apples but not bananas", &v),
            bow_featurize("I like bananas but not apples", &v)
        );
    }

    #[test]
    fn counts_and_empty() {
        let v = vocab(&["a", "b"]);
        assert!(bow_featurize("", &v).is_empty());
        assert_eq!(bow_featurize("a a b", &v), vec![(0, 2.0), (1, 1.0)]);
    }

    #[test]
    fn single_class_rejected() {
        let mut c = Corpus::new("x");
        c.register(&Label::new(0, "a")).unwrap();
        c.push(TextSequence {
            text: "hi".into(),
            label: 0,
            source_id: String::new(),
        })
        .unwrap();
        assert!(bow_train(&c, &BowHyper::default()).is_err());
    }

    #[test]
    fn learns_disjoint_vocabularies() {
        let mut c = Corpus::new("x");
        c.register(&Label::new(3, "a")).unwrap();
        c.register(&Label::new(7, "b")).unwrap();
        for i in 0..40 {
            let (text, label) = if i % 2 == 0 { ("red green blue red", 3) } else { ("cat dog cat bird", 7) };
            c.push(TextSequence {
                text: text.into(),
                label,
                source_id: String::new(),
            })
            .unwrap();
        }
        let m = bow_train(&c, &BowHyper::default()).unwrap();
        assert_eq!(bow_predict(&m, "blue red"), 3);
        assert_eq!(bow_predict(&m, "bird dog"), 7);
    }
}
