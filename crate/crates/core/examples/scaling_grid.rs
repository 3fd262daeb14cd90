//! Accuracy of a from-scratch transformer as the training-token budget
//! grows.
//!
//!     cargo run --release --example scaling_grid -- 250000 500000 1000000

use dsclf::corpus::bench::{build_benchmark, subtle_bias_domains, SubtleBias};
use dsclf::eval::{evaluate, run_scaling_grid, GridAxis, TransformerClassifier};
use dsclf::model::{build_transformer, HeadMode, Transformer, TransformerConfig};
use dsclf::packing::pack_to_shards;
use dsclf::tokenizer::Tokenizer;
use dsclf::train::{finetune_classifier, TrainHyper};

fn main() -> anyhow::Result<()> {
    let mut budgets: Vec<usize> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    if budgets.is_empty() {
        budgets = vec![125_000, 250_000, 500_000];
    }
    let specs = subtle_bias_domains(&SubtleBias::default(), 11)?;
    let (train, test) = build_benchmark(&specs, 20_000, 500)?;
    let tok = Tokenizer::fit(train.sequences().iter().map(|s| s.text.as_str()), 1000, 1);
    let cfg = TransformerConfig {
        hidden_dim: 64,
        n_layers: 2,
        context_length: 128,
        vocab_size: tok.vocab_size() as usize,
        ..TransformerConfig::preset("tiny")?
    };
    let (shards, _) = pack_to_shards(&train, &tok, cfg.context_length, 1 << 20)?;
    let rows: usize = shards.iter().map(|s| s.row_count()).sum();
    println!("{rows} training rows available ({} tokens)", rows * cfg.context_length);

    let base = TrainHyper {
        lr: 3e-3,
        warmup_steps: 20,
        ..TrainHyper::default()
    };
    let points: Vec<(String, f64)> = budgets.iter().map(|&b| (format!("{}k", b / 1000), b as f64)).collect();
    let grid = run_scaling_grid(GridAxis::TrainTokens, &points, |_, budget| {
        let hyper = base.for_token_budget(budget as usize, rows, cfg.context_length)?;
        let model: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, 1)?;
        let (model, _) = finetune_classifier(model, &shards, &hyper, true)?;
        Ok(evaluate(&TransformerClassifier::new(&model, &tok)?, &test)?.accuracy)
    })?;
    print!("{}", grid.to_table());
    Ok(())
}
