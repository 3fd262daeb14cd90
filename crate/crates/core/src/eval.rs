//! Evaluation battery: whole-sequence, majority-vote, length-bucketed and
//! aggregated-sequence accuracy, plus scaling grids and report tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{bow_predict, shallow_predict, BowModel, HeadMode, Scalar, ShallowModel, Transformer};
use crate::packing::prepare_test_sequence;
use crate::tokenizer::Tokenizer;

/// Anything that maps a text to a dataset label.
pub trait TextClassifier: Sync {
    fn predict(&self, text: &str) -> Result<u16>;
}

impl TextClassifier for BowModel {
    fn predict(&self, text: &str) -> Result<u16> {
        Ok(bow_predict(self, text))
    }
}

impl TextClassifier for ShallowModel {
    fn predict(&self, text: &str) -> Result<u16> {
        Ok(shallow_predict(self, text))
    }
}

/// Adapter for closures, handy for oracles and baselines.
pub struct FnClassifier<G>(pub G);

impl<G: Fn(&str) -> u16 + Sync> TextClassifier for FnClassifier<G> {
    fn predict(&self, text: &str) -> Result<u16> {
        Ok((self.0)(text))
    }
}

/// A class-head transformer with its tokenizer. Class index = label id.
pub struct TransformerClassifier<'a, F: Scalar = f32> {
    pub model: &'a Transformer<F>,
    pub tokenizer: &'a Tokenizer,
}

impl<'a, F: Scalar> TransformerClassifier<'a, F> {
    pub fn new(model: &'a Transformer<F>, tokenizer: &'a Tokenizer) -> Result<Self> {
        if model.head_mode.is_lm() {
            return Err(Error::InvalidArgument("evaluation needs a class head".into()));
        }
        if tokenizer.vocab_size() as usize > model.config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer vocabulary {} exceeds the model's {}",
                tokenizer.vocab_size(),
                model.config.vocab_size
            )));
        }
        Ok(TransformerClassifier { model, tokenizer })
    }

    pub fn n_classes(&self) -> usize {
        match self.model.head_mode {
            HeadMode::ClassHead { n_classes } => n_classes,
            HeadMode::LmHead => unreachable!("checked in new"),
        }
    }

    /// Per-position class logits of the prepared (truncated) sequence.
    pub fn position_logits(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let ids = prepare_test_sequence(self.tokenizer, text, self.model.config.context_length)?;
        self.logits_of_ids(&ids)
    }

    pub fn logits_of_ids(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let k = self.n_classes();
        let flat = self.model.logits(ids)?;
        Ok(flat
            .chunks_exact(k)
            .map(|r| r.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
            .collect())
    }

    pub fn predict_ids(&self, ids: &[u32]) -> Result<u16> {
        let logits = self.logits_of_ids(ids)?;
        Ok(argmax(logits.last().expect("non-empty")) as u16)
    }

    /// Majority vote over per-position argmaxes; a tie goes to the tied
    /// class with the larger final-position logit.
    pub fn predict_majority(&self, text: &str) -> Result<u16> {
        let logits = self.position_logits(text)?;
        Ok(majority_vote(&logits) as u16)
    }
}

impl<F: Scalar> TextClassifier for TransformerClassifier<'_, F> {
    fn predict(&self, text: &str) -> Result<u16> {
        let ids = prepare_test_sequence(self.tokenizer, text, self.model.config.context_length)?;
        self.predict_ids(&ids)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn majority_vote(position_logits: &[Vec<f64>]) -> usize {
    let k = position_logits[0].len();
    let mut votes = vec![0usize; k];
    for row in position_logits {
        votes[argmax(row)] += 1;
    }
    let top = *votes.iter().max().expect("k > 0");
    let last = position_logits.last().expect("non-empty");
    (0..k)
        .filter(|&c| votes[c] == top)
        .fold(None, |best: Option<usize>, c| match best {
            Some(b) if last[b] >= last[c] => Some(b),
            _ => Some(c),
        })
        .expect("some class has the top count")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    WholeSeq,
    Majority,
    Aggregated,
    ByLength,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "whole" | "whole-seq" => EvalMode::WholeSeq,
            "majority" => EvalMode::Majority,
            "aggregated" => EvalMode::Aggregated,
            "by-length" => EvalMode::ByLength,
            _ => return Err(Error::InvalidArgument(format!("unknown eval mode {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: usize,
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub insufficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub labels: Vec<u16>,
    pub label_names: Vec<String>,
    /// `confusion[true][predicted]`, indexed like `labels`
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub n_test: usize,
    /// Test classes differ in size.
    pub imbalanced: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buckets: Vec<LengthBucket>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl EvalReport {
    /// Build a report from `(truth, prediction)` pairs over the labels
    /// registered in `test`.
    pub fn from_pairs(mode: EvalMode, test: &Corpus, pairs: &[(u16, u16)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let labels: Vec<u16> = test.labels().map(|l| l.id).collect();
        let label_names: Vec<String> = test.labels().map(|l| l.name).collect();
        let pos: BTreeMap<u16, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
        let k = labels.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for &(t, p) in pairs {
            let ti = pos[&t];
            let pi = *pos
                .get(&p)
                .ok_or_else(|| Error::InvalidArgument(format!("prediction {p} is not a registered label of the test set")))?;
            confusion[ti][pi] += 1;
        }
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        let counts: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).filter(|&n| n > 0).collect();
        let imbalanced = counts.windows(2).any(|w| w[0] != w[1]);
        if imbalanced {
            log::warn!("test set is imbalanced across classes: {counts:?}");
        }
        Ok(EvalReport {
            mode,
            labels,
            label_names,
            confusion,
            accuracy: trace as f64 / pairs.len() as f64,
            per_class_accuracy,
            n_test: pairs.len(),
            imbalanced,
            buckets: Vec::new(),
            metadata: serde_json::Value::Null,
        })
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }

    /// Human-readable summary with the confusion matrix.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "mode: {:?}  n_test: {}  accuracy: {:.2}%{}\n",
            self.mode,
            self.n_test,
            100.0 * self.accuracy,
            if self.imbalanced { "  (imbalanced test set)" } else { "" }
        );
        let w = self.label_names.iter().map(|n| n.len()).max().unwrap_or(4).max(6);
        s += &format!("{:w$} |", "true\\pred");
        for n in &self.label_names {
            s += &format!(" {n:>w$}");
        }
        s += " | acc\n";
        for (i, row) in self.confusion.iter().enumerate() {
            s += &format!("{:w$} |", self.label_names[i]);
            for c in row {
                s += &format!(" {c:>w$}");
            }
            match self.per_class_accuracy[i] {
                Some(a) => s += &format!(" | {:.2}%\n", 100.0 * a),
                None => s += " | -\n",
            }
        }
        for b in &self.buckets {
            s += &format!(
                "[{:>5}, {:>5}) n={:<6} {}{}\n",
                b.lo,
                b.hi,
                b.n,
                b.accuracy.map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a)),
                if b.insufficient { "  insufficient" } else { "" }
            );
        }
        s
    }
}

pub fn evaluate<C: TextClassifier + ?Sized>(clf: &C, test: &Corpus) -> Result<EvalReport> {
    let pairs: Vec<(u16, u16)> = test
        .sequences()
        .par_iter()
        .map(|s| clf.predict(&s.text).map(|p| (s.label, p)))
        .collect::<Result<_>>()?;
    EvalReport::from_pairs(EvalMode::WholeSeq, test, &pairs)
}

pub fn evaluate_majority<F: Scalar>(clf: &TransformerClassifier<'_, F>, test: &Corpus) -> Result<EvalReport> {
    let pairs: Vec<(u16, u16)> = test
        .sequences()
        .par_iter()
        .map(|s| clf.predict_majority(&s.text).map(|p| (s.label, p)))
        .collect::<Result<_>>()?;
    EvalReport::from_pairs(EvalMode::Majority, test, &pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBuckets {
    pub bucket_width: usize,
    pub max_len: usize,
    /// Sequences evaluated per bucket; fewer available marks the bucket
    /// insufficient.
    pub per_bucket: usize,
}

impl Default for LengthBuckets {
    fn default() -> Self {
        LengthBuckets {
            bucket_width: 200,
            max_len: 2000,
            per_bucket: 1024,
        }
    }
}

impl LengthBuckets {
    pub fn n_buckets(&self) -> usize {
        self.max_len.div_ceil(self.bucket_width)
    }

    /// Bucket of a token length; the top edge belongs to the last bucket.
    pub fn bucket_of(&self, len: usize) -> Option<usize> {
        if len > self.max_len {
            return None;
        }
        Some((len / self.bucket_width).min(self.n_buckets() - 1))
    }
}

/// Accuracy per token-length interval. Within a bucket, sequences are taken
/// round-robin across labels so each bucket stays balanced where possible.
pub fn evaluate_by_length<C: TextClassifier + ?Sized>(
    clf: &C,
    tokenizer: &Tokenizer,
    test: &Corpus,
    opts: LengthBuckets,
) -> Result<EvalReport> {
    if opts.bucket_width == 0 || opts.max_len == 0 {
        return Err(Error::InvalidArgument("bucket width and max length must be positive".into()));
    }
    let nb = opts.n_buckets();
    let lengths: Vec<usize> = test
        .sequences()
        .par_iter()
        .map(|s| tokenizer.encode(&s.text).len())
        .collect();
    let mut members: Vec<BTreeMap<u16, Vec<usize>>> = vec![BTreeMap::new(); nb];
    for (i, (s, &len)) in test.sequences().iter().zip(&lengths).enumerate() {
        if let Some(b) = opts.bucket_of(len) {
            members[b].entry(s.label).or_default().push(i);
        }
    }
    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(nb);
    for m in &members {
        let mut queues: Vec<std::collections::VecDeque<usize>> = m.values().map(|v| v.iter().copied().collect()).collect();
        let mut picked = Vec::new();
        while picked.len() < opts.per_bucket && queues.iter().any(|q| !q.is_empty()) {
            for q in &mut queues {
                if picked.len() < opts.per_bucket {
                    if let Some(i) = q.pop_front() {
                        picked.push(i);
                    }
                }
            }
        }
        chosen.push(picked);
    }
    let flat: Vec<(usize, usize)> = chosen
        .iter()
        .enumerate()
        .flat_map(|(b, v)| v.iter().map(move |&i| (b, i)))
        .collect();
    if flat.is_empty() {
        return Err(Error::Empty("test sequences within the length range"));
    }
    let preds: Vec<(usize, u16, u16)> = flat
        .par_iter()
        .map(|&(b, i)| {
            let s = &test.sequences()[i];
            clf.predict(&s.text).map(|p| (b, s.label, p))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(u16, u16)> = preds.iter().map(|&(_, t, p)| (t, p)).collect();
    let mut report = EvalReport::from_pairs(EvalMode::ByLength, test, &pairs)?;
    report.buckets = (0..nb)
        .map(|b| {
            let in_b: Vec<_> = preds.iter().filter(|x| x.0 == b).collect();
            let correct = in_b.iter().filter(|x| x.1 == x.2).count();
            LengthBucket {
                lo: b * opts.bucket_width,
                hi: ((b + 1) * opts.bucket_width).min(opts.max_len),
                n: in_b.len(),
                correct,
                accuracy: (!in_b.is_empty()).then(|| correct as f64 / in_b.len() as f64),
                insufficient: in_b.len() < opts.per_bucket,
            }
        })
        .collect();
    Ok(report)
}

/// Concatenate same-label test sequences (separated by end-of-text) into
/// rows of exactly `context_length` ids, as in training. A label whose
/// stream is shorter than one row contributes that single shorter row.
pub fn aggregated_rows(tokenizer: &Tokenizer, test: &Corpus, context_length: usize) -> Result<Vec<(u16, Vec<u32>)>> {
    if context_length == 0 {
        return Err(Error::InvalidArgument("context length must be positive".into()));
    }
    let mut out = Vec::new();
    for label in test.labels() {
        let mut stream: Vec<u32> = Vec::new();
        for t in test.texts_of(label.id) {
            stream.extend(tokenizer.encode(t));
            stream.push(tokenizer.eot_id());
        }
        if stream.is_empty() {
            continue;
        }
        if stream.len() < context_length {
            out.push((label.id, stream));
            continue;
        }
        out.extend(stream.chunks_exact(context_length).map(|c| (label.id, c.to_vec())));
    }
    Ok(out)
}

pub fn evaluate_aggregated<F: Scalar>(clf: &TransformerClassifier<'_, F>, test: &Corpus) -> Result<EvalReport> {
    let rows = aggregated_rows(clf.tokenizer, test, clf.model.config.context_length)?;
    let pairs: Vec<(u16, u16)> = rows
        .par_iter()
        .map(|(l, ids)| clf.predict_ids(ids).map(|p| (*l, p)))
        .collect::<Result<_>>()?;
    EvalReport::from_pairs(EvalMode::Aggregated, test, &pairs)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridAxis {
    ModelSize,
    TrainTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub name: String,
    pub value: f64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingGrid {
    pub axis: GridAxis,
    pub points: Vec<GridPoint>,
}

/// Run `run` once per point. A failing point is recorded and the grid
/// continues.
pub fn run_scaling_grid(
    axis: GridAxis,
    points: &[(String, f64)],
    mut run: impl FnMut(&str, f64) -> Result<f64>,
) -> Result<ScalingGrid> {
    if points.is_empty() {
        return Err(Error::Empty("grid points"));
    }
    if points.windows(2).any(|w| w[1].1 <= w[0].1) {
        return Err(Error::InvalidArgument("grid points must be strictly increasing".into()));
    }
    let points = points
        .iter()
        .map(|(name, value)| match run(name, *value) {
            Ok(a) => GridPoint {
                name: name.clone(),
                value: *value,
                accuracy: Some(a),
                error: None,
            },
            Err(e) => {
                log::warn!("grid point {name} failed: {e}");
                GridPoint {
                    name: name.clone(),
                    value: *value,
                    accuracy: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    Ok(ScalingGrid { axis, points })
}

impl ScalingGrid {
    pub fn to_table(&self) -> String {
        let head = match self.axis {
            GridAxis::ModelSize => "Model size",
            GridAxis::TrainTokens => "Training tokens",
        };
        let mut s = format!("{head:<16} | Accuracy (%)\n{:-<16}-+-------------\n", "");
        for p in &self.points {
            let acc = match (&p.accuracy, &p.error) {
                (Some(a), _) => format!("{:.2}", 100.0 * a),
                (None, Some(e)) => format!("failed: {e}"),
                _ => "-".into(),
            };
            s += &format!("{:<16} | {acc}\n", p.name);
        }
        s
    }
}

/// Accuracy per dataset combination, one row each.
pub fn accuracy_table(rows: &[(String, f64)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(8).max(8);
    let mut s = format!("{:w$} | Accuracy (%)\n{:-<w$}-+-------------\n", "Datasets", "");
    for (name, acc) in rows {
        s += &format!("{name:w$} | {:.2}\n", 100.0 * acc);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, TextSequence};

    fn corpus(labels: &[u16]) -> Corpus {
        let mut c = Corpus::new("t");
        for &l in &[0u16, 1, 2] {
            c.register(&Label::new(l, format!("d{l}"))).unwrap();
        }
        for (i, &l) in labels.iter().enumerate() {
            c.push(TextSequence {
                text: format!("{l} {i}"),
                label: l,
                source_id: String::new(),
            })
            .unwrap();
        }
        c
    }

    #[test]
    fn oracle_gives_identity_confusion() {
        let c = corpus(&[0, 1, 2, 0, 1, 2]);
        let oracle = FnClassifier(|t: &str| t[..1].parse::<u16>().unwrap());
        let r = evaluate(&oracle, &c).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        assert!(!r.imbalanced);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let c = corpus(&[]);
        assert!(evaluate(&FnClassifier(|_: &str| 0), &c).is_err());
    }

    #[test]
    fn majority_votes_and_breaks_ties_by_last_logit() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        assert_eq!(majority_vote(&[a.clone(), a.clone(), b.clone()]), 0);
        assert_eq!(majority_vote(&[a.clone(), b.clone()]), 1);
        assert_eq!(majority_vote(&[b, a]), 0);
    }

    #[test]
    fn buckets_partition_the_range() {
        let o = LengthBuckets::default();
        assert_eq!(o.n_buckets(), 10);
        assert_eq!(o.bucket_of(0), Some(0));
        assert_eq!(o.bucket_of(199), Some(0));
        assert_eq!(o.bucket_of(200), Some(1));
        assert_eq!(o.bucket_of(2000), Some(9));
        assert_eq!(o.bucket_of(2001), None);
    }

    #[test]
    fn spearman_of_monotone_series() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 25.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    }

    #[test]
    fn grid_requires_increasing_points_and_survives_failures() {
        let pts = vec![("a".to_string(), 1.0), ("b".to_string(), 1.0)];
        assert!(run_scaling_grid(GridAxis::TrainTokens, &pts, |_, _| Ok(0.5)).is_err());
        let pts = vec![("a".to_string(), 1.0), ("b".to_string(), 2.0)];
        let g = run_scaling_grid(GridAxis::TrainTokens, &pts, |n, _| {
            if n == "a" {
                Err(Error::Config("boom".into()))
            } else {
                Ok(0.5)
            }
        })
        .unwrap();
        assert!(g.points[0].error.is_some());
        assert_eq!(g.points[1].accuracy, Some(0.5));
    }
}
