//! Train a small transformer classifier from scratch with the per-position
//! loss, then evaluate it four ways.
//!
//!     cargo run --release --example train_transformer

use std::time::Instant;

use dsclf::corpus::bench::{build_benchmark, subtle_bias_domains, SubtleBias};
use dsclf::eval::{evaluate, evaluate_aggregated, evaluate_by_length, evaluate_majority, LengthBuckets, TransformerClassifier};
use dsclf::model::{build_transformer, HeadMode, Transformer, TransformerConfig};
use dsclf::packing::pack_to_shards;
use dsclf::tokenizer::Tokenizer;
use dsclf::train::{finetune_classifier, TrainHyper};

fn main() -> anyhow::Result<()> {
    let n_train: usize = std::env::args().nth(1).map_or(Ok(4000), |s| s.parse())?;
    let specs = subtle_bias_domains(&SubtleBias::default(), 11)?;
    let (train, test) = build_benchmark(&specs, n_train, 500)?;
    let tok = Tokenizer::fit(train.sequences().iter().map(|s| s.text.as_str()), 1000, 1);

    let cfg = TransformerConfig {
        hidden_dim: 64,
        n_layers: 2,
        context_length: 128,
        vocab_size: tok.vocab_size() as usize,
        ..TransformerConfig::preset("tiny")?
    };
    let (shards, _) = pack_to_shards(&train, &tok, cfg.context_length, 1 << 20)?;
    let model: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, 1)?;
    println!("{} parameters", model.n_params());

    let hyper = TrainHyper {
        lr: 3e-3,
        warmup_steps: 20,
        ..TrainHyper::default()
    };
    let t = Instant::now();
    let (model, report) = finetune_classifier(model, &shards, &hyper, true)?;
    println!(
        "{} steps, {} tokens in {:.1?}; loss {:.3} -> {:.3}",
        report.steps,
        report.tokens_seen,
        t.elapsed(),
        report.initial_loss().unwrap(),
        report.final_loss().unwrap()
    );

    let clf = TransformerClassifier::new(&model, &tok)?;
    print!("{}", evaluate(&clf, &test)?.to_table());
    println!("majority vote: {:.2}%", 100.0 * evaluate_majority(&clf, &test)?.accuracy);
    println!("aggregated rows: {:.2}%", 100.0 * evaluate_aggregated(&clf, &test)?.accuracy);
    let buckets = LengthBuckets {
        bucket_width: 32,
        max_len: 128,
        per_bucket: 300,
    };
    for b in evaluate_by_length(&clf, &tok, &test, buckets)?.buckets {
        let acc = b.accuracy.map_or("-".into(), |a| format!("{:.1}%", 100.0 * a));
        println!("  tokens [{:>3}, {:>3}) n={:<4} {acc}", b.lo, b.hi, b.n);
    }
    Ok(())
}
