#![allow(dead_code)]

use dsclf::model::{build_transformer, GradScope, HeadMode, Transformer, TransformerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn micro_config(vocab: usize, context: usize) -> TransformerConfig {
    TransformerConfig {
        hidden_dim: 16,
        n_heads: 2,
        n_layers: 2,
        context_length: context,
        vocab_size: vocab,
        ffn_multiple_of: 8,
        ..TransformerConfig::preset("tiny").unwrap()
    }
}

/// Largest relative error between the analytic gradient and a central
/// difference over `n_samples` random parameters.
pub fn gradient_check(n_samples: usize, seed: u64) -> f64 {
    let vocab = 12;
    let cfg = TransformerConfig {
        init_std: 0.3,
        ..micro_config(vocab, 16)
    };
    let mut model: Transformer<f64> = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // move norm gains away from exactly one
    for x in model.params.data.iter_mut() {
        *x += rng.gen_range(-0.05..0.05);
    }
    let (batch, len) = (2, 10);
    let tokens: Vec<u32> = (0..batch * len).map(|i| (i % vocab) as u32).collect();
    let targets: Vec<u32> = (0..batch * len).map(|i| if i < len { 1 } else { 2 }).collect();
    let mut grad = vec![0.0; model.params.len()];
    model
        .loss_and_grad(&tokens, &targets, batch, &mut grad, GradScope::Full)
        .unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n_samples {
        let i = rng.gen_range(0..model.params.len());
        let orig = model.params.data[i];
        model.params.data[i] = orig + h;
        let lp = model.loss(&tokens, &targets, batch).unwrap();
        model.params.data[i] = orig - h;
        let lm = model.loss(&tokens, &targets, batch).unwrap();
        model.params.data[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}
