//! Training loops: language-model pretraining, per-position classification
//! finetuning (from a pretrained body or from scratch) and linear probing.
//!
//! All loops share one optimizer step: AdamW with decoupled weight decay on
//! matrices, global-norm gradient clipping, linear warmup then cosine decay
//! to zero. Batches are split into micro-batches whose gradients are summed
//! in a fixed order, so a seeded run is bit-reproducible.

use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradScope, HeadMode, Scalar, Transformer};
use crate::packing::{PackedRow, Shard};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub mixed_precision: bool,
    pub seed: u64,
    /// Sum micro-batch gradients in a fixed order.
    pub deterministic: bool,
    /// Rows per gradient evaluation; bounds activation memory.
    pub micro_batch: usize,
    /// Cap on optimizer steps; the schedule spans the capped run.
    pub max_steps: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 16,
            grad_clip_norm: 1.0,
            lr: 3e-4,
            warmup_steps: 2000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.2,
            epochs: 1,
            mixed_precision: false,
            seed: 0,
            deterministic: true,
            micro_batch: 4,
            max_steps: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch_size and micro_batch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.grad_clip_norm > 0.0) {
            return Err(Error::Config("lr must be non-negative and grad_clip_norm positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Epochs and step cap so a run over `n_rows` rows of `row_tokens`
    /// tokens sees about `budget` tokens.
    pub fn for_token_budget(&self, budget: usize, n_rows: usize, row_tokens: usize) -> Result<Self> {
        if n_rows == 0 || row_tokens == 0 {
            return Err(Error::Empty("training rows"));
        }
        let per_step = self.batch_size * row_tokens;
        let steps = budget.div_ceil(per_step).max(1);
        let epochs = (steps * self.batch_size).div_ceil(n_rows).max(1);
        Ok(TrainHyper {
            epochs,
            max_steps: Some(steps),
            ..self.clone()
        })
    }

    /// Learning rate at `step` (0-based) of a run with `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Pretrain,
    Finetune,
    FromScratch,
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub steps: usize,
    pub rows_seen: usize,
    pub tokens_seen: usize,
    /// Loss of every optimizer step, before the update.
    pub losses: Vec<f64>,
    pub seed: u64,
    pub checksum: u64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

struct AdamW<F> {
    m: Vec<F>,
    v: Vec<F>,
    step: i32,
}

impl<F: Scalar> AdamW<F> {
    fn new(n: usize) -> Self {
        AdamW {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [F], grad: &[F], decay: &[bool], lr: f64, h: &TrainHyper, range: std::ops::Range<usize>) {
        self.step += 1;
        let (b1, b2) = (F::of(h.beta1), F::of(h.beta2));
        let one = F::one();
        let bc1 = F::of(1.0 - h.beta1.powi(self.step));
        let bc2 = F::of(1.0 - h.beta2.powi(self.step));
        let (lr_f, eps, wd) = (F::of(lr), F::of(h.eps), F::of(lr * h.weight_decay));
        for i in range {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            if decay[i] {
                params[i] = params[i] - wd * params[i];
            }
            params[i] = params[i] - lr_f * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy)]
enum Objective {
    NextToken,
    Classify,
}

struct Batch {
    tokens: Vec<u32>,
    targets: Vec<u32>,
    rows: usize,
    len: usize,
}

fn make_batch(rows: &[&PackedRow], objective: Objective) -> Batch {
    let len = rows[0].tokens.len() - 1;
    let mut tokens = Vec::with_capacity(rows.len() * len);
    let mut targets = Vec::with_capacity(rows.len() * len);
    for r in rows {
        tokens.extend_from_slice(r.inputs());
        match objective {
            Objective::NextToken => targets.extend_from_slice(r.targets()),
            Objective::Classify => targets.extend(std::iter::repeat(r.label as u32).take(len)),
        }
    }
    Batch {
        tokens,
        targets,
        rows: rows.len(),
        len,
    }
}

/// Rows of every shard after checking them against the model.
pub fn shard_rows<F: Scalar>(model: &Transformer<F>, shards: &[Shard]) -> Result<Vec<PackedRow>> {
    let c = &model.config;
    let mut rows = Vec::new();
    for s in shards {
        let h = &s.header;
        if h.context_length as usize > c.context_length {
            return Err(Error::Config(format!(
                "shard context length {} exceeds the model's {}",
                h.context_length, c.context_length
            )));
        }
        if h.vocab_size as usize > c.vocab_size {
            return Err(Error::Config(format!(
                "shard vocabulary {} exceeds the model's {}",
                h.vocab_size, c.vocab_size
            )));
        }
        rows.extend(s.rows());
    }
    if let Some(r) = rows.first() {
        if rows.iter().any(|x| x.tokens.len() != r.tokens.len()) {
            return Err(Error::Config("shards disagree on context length".into()));
        }
    }
    Ok(rows)
}

/// Row order for one epoch: shuffled, or for classification, shuffled
/// within each label and interleaved round-robin across labels.
fn epoch_order(rows: &[PackedRow], objective: Objective, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match objective {
        Objective::NextToken => {
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(rng);
            order
        }
        Objective::Classify => {
            let mut by_label: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
            for (i, r) in rows.iter().enumerate() {
                by_label.entry(r.label).or_default().push(i);
            }
            let mut queues: Vec<Vec<usize>> = by_label.into_values().collect();
            for q in &mut queues {
                q.shuffle(rng);
                q.reverse();
            }
            let mut order = Vec::with_capacity(rows.len());
            while order.len() < rows.len() {
                for q in &mut queues {
                    if let Some(i) = q.pop() {
                        order.push(i);
                    }
                }
            }
            order
        }
    }
}

fn global_norm<F: Scalar>(grad: &[F], range: std::ops::Range<usize>) -> f64 {
    grad[range]
        .iter()
        .map(|g| {
            let x = g.to_f64().unwrap_or(0.0);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

fn batch_grad<F: Scalar>(model: &Transformer<F>, batch: &Batch, micro: usize, scope: GradScope, deterministic: bool) -> Result<(f64, Vec<F>)> {
    let n = model.params.len();
    let per_row = batch.len;
    let chunks: Vec<(usize, usize)> = (0..batch.rows)
        .step_by(micro)
        .map(|s| (s, (s + micro).min(batch.rows)))
        .collect();
    let run = |&(s, e): &(usize, usize)| -> Result<(f64, Vec<F>)> {
        let mut g = vec![F::zero(); n];
        let toks = &batch.tokens[s * per_row..e * per_row];
        let tgts = &batch.targets[s * per_row..e * per_row];
        let loss = model.loss_and_grad(toks, tgts, e - s, &mut g, scope)?;
        let w = F::of((e - s) as f64 / batch.rows as f64);
        g.iter_mut().for_each(|x| *x = *x * w);
        Ok((loss.to_f64().unwrap_or(f64::NAN) * (e - s) as f64 / batch.rows as f64, g))
    };
    let add = |(la, mut ga): (f64, Vec<F>), (lb, gb): (f64, Vec<F>)| {
        ga.iter_mut().zip(&gb).for_each(|(a, &b)| *a = *a + b);
        (la + lb, ga)
    };
    if deterministic {
        let parts: Vec<(f64, Vec<F>)> = chunks.par_iter().map(run).collect::<Result<_>>()?;
        Ok(parts.into_iter().reduce(add).expect("non-empty batch"))
    } else {
        chunks
            .par_iter()
            .map(run)
            .try_reduce(|| (0.0, vec![F::zero(); n]), |a, b| Ok(add(a, b)))
    }
}

fn train_loop<F: Scalar>(
    model: &mut Transformer<F>,
    rows: &[PackedRow],
    hyper: &TrainHyper,
    objective: Objective,
    scope: GradScope,
    mode: TrainMode,
) -> Result<TrainReport> {
    hyper.validate()?;
    model.mixed_precision = hyper.mixed_precision;
    let n = model.params.len();
    let update_range = match scope {
        GradScope::Full => 0..n,
        GradScope::HeadOnly => model.head_range(),
    };
    let mut decay = vec![false; n];
    for t in &model.params.tensors {
        if t.shape.len() == 2 {
            decay[t.range()].iter_mut().for_each(|d| *d = true);
        }
    }
    let mut opt = AdamW::<F>::new(n);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let steps_per_epoch = rows.len().div_ceil(hyper.batch_size);
    let planned = steps_per_epoch * hyper.epochs;
    let total = hyper.max_steps.map_or(planned, |m| m.min(planned));
    let orders: Vec<Vec<usize>> = (0..hyper.epochs).map(|_| epoch_order(rows, objective, &mut rng)).collect();

    let mut report = TrainReport {
        mode,
        steps: 0,
        rows_seen: 0,
        tokens_seen: 0,
        losses: Vec::with_capacity(total),
        seed: hyper.seed,
        checksum: 0,
    };
    let (tx, rx) = sync_channel::<Batch>(2);
    std::thread::scope(|scope_| -> Result<()> {
        let orders = &orders;
        scope_.spawn(move || {
            let mut sent = 0;
            for order in orders {
                for chunk in order.chunks(hyper.batch_size) {
                    if sent == total {
                        return;
                    }
                    let picked: Vec<&PackedRow> = chunk.iter().map(|&i| &rows[i]).collect();
                    if tx.send(make_batch(&picked, objective)).is_err() {
                        return;
                    }
                    sent += 1;
                }
            }
        });
        for step in 0..total {
            let batch = rx.recv().map_err(|_| Error::InvalidArgument("batch loader stopped early".into()))?;
            let (loss, mut grad) = batch_grad(model, &batch, hyper.micro_batch, scope, hyper.deterministic)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!("loss became {loss} at step {step}")));
            }
            let norm = global_norm(&grad, update_range.clone());
            if norm > hyper.grad_clip_norm {
                let s = F::of(hyper.grad_clip_norm / norm);
                grad[update_range.clone()].iter_mut().for_each(|g| *g = *g * s);
            }
            let lr = hyper.lr_at(step, total);
            opt.update(&mut model.params.data, &grad, &decay, lr, hyper, update_range.clone());
            report.steps += 1;
            report.rows_seen += batch.rows;
            report.tokens_seen += batch.rows * batch.len;
            report.losses.push(loss);
            log::debug!("step {step} loss {loss:.4} lr {lr:.2e}");
        }
        Ok(())
    })?;
    report.checksum = model.checksum();
    Ok(report)
}

/// Next-token pretraining of a language-model head.
pub fn pretrain_lm<F: Scalar>(mut model: Transformer<F>, shards: &[Shard], hyper: &TrainHyper) -> Result<(Transformer<F>, TrainReport)> {
    if !model.head_mode.is_lm() {
        return Err(Error::InvalidArgument("pretraining needs a language-model head".into()));
    }
    let rows = shard_rows(&model, shards)?;
    let report = train_loop(&mut model, &rows, hyper, Objective::NextToken, GradScope::Full, TrainMode::Pretrain)?;
    Ok((model, report))
}

fn check_labels<F: Scalar>(model: &Transformer<F>, rows: &[PackedRow]) -> Result<()> {
    let HeadMode::ClassHead { n_classes } = model.head_mode else {
        return Err(Error::InvalidArgument("classification needs a class head".into()));
    };
    if let Some(r) = rows.iter().find(|r| r.label as usize >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside the {n_classes} classes of the head",
            r.label
        )));
    }
    Ok(())
}

/// Per-position classification training: every position of a row is
/// trained toward the row's label. `from_scratch` only tags the report.
pub fn finetune_classifier<F: Scalar>(
    mut model: Transformer<F>,
    shards: &[Shard],
    hyper: &TrainHyper,
    from_scratch: bool,
) -> Result<(Transformer<F>, TrainReport)> {
    let rows = shard_rows(&model, shards)?;
    check_labels(&model, &rows)?;
    let mode = if from_scratch { TrainMode::FromScratch } else { TrainMode::Finetune };
    let report = train_loop(&mut model, &rows, hyper, Objective::Classify, GradScope::Full, mode)?;
    Ok((model, report))
}

/// Replace the language-model head with a fresh class head and train only
/// that head; the body stays bit-identical.
pub fn linear_probe<F: Scalar>(
    pretrained: Transformer<F>,
    n_classes: usize,
    shards: &[Shard],
    hyper: &TrainHyper,
) -> Result<(Transformer<F>, TrainReport)> {
    if !pretrained.head_mode.is_lm() {
        return Err(Error::InvalidArgument("linear probing starts from a language-model head".into()));
    }
    let mut model = pretrained.replace_head(n_classes)?;
    let rows = shard_rows(&model, shards)?;
    check_labels(&model, &rows)?;
    let body = model.body_checksum();
    let report = train_loop(&mut model, &rows, hyper, Objective::Classify, GradScope::HeadOnly, TrainMode::LinearProbe)?;
    debug_assert_eq!(body, model.body_checksum());
    Ok((model, report))
}

/// Mean next-token loss over rows, for held-out evaluation.
pub fn lm_loss<F: Scalar>(model: &Transformer<F>, rows: &[PackedRow]) -> Result<f64> {
    mean_loss(model, rows, Objective::NextToken)
}

/// Mean per-position classification loss over rows.
pub fn classification_loss<F: Scalar>(model: &Transformer<F>, rows: &[PackedRow]) -> Result<f64> {
    check_labels(model, rows)?;
    mean_loss(model, rows, Objective::Classify)
}

fn mean_loss<F: Scalar>(model: &Transformer<F>, rows: &[PackedRow], objective: Objective) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Empty("rows"));
    }
    let losses: Vec<f64> = rows
        .par_iter()
        .map(|r| {
            let b = make_batch(&[r], objective);
            model.loss(&b.tokens, &b.targets, 1).map(|l| l.to_f64().unwrap_or(f64::NAN))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
