//! Pretrain a language model, then compare a linear probe on its frozen
//! body with full fine-tuning, and save and reload a checkpoint.
//!
//!     cargo run --release --example pretrain_probe

use dsclf::corpus::bench::{build_benchmark, subtle_bias_domains, SubtleBias};
use dsclf::corpus::{Corpus, Label, TextSequence};
use dsclf::eval::{evaluate, TransformerClassifier};
use dsclf::model::{build_transformer, load_checkpoint, save_checkpoint, HeadMode, Transformer, TransformerConfig};
use dsclf::packing::pack_to_shards;
use dsclf::tokenizer::Tokenizer;
use dsclf::train::{finetune_classifier, linear_probe, pretrain_lm, TrainHyper};

fn main() -> anyhow::Result<()> {
    let specs = subtle_bias_domains(&SubtleBias::default(), 5)?;
    let (train, test) = build_benchmark(&specs, 3000, 500)?;
    let tok = Tokenizer::fit(train.sequences().iter().map(|s| s.text.as_str()), 1000, 1);
    let cfg = TransformerConfig {
        hidden_dim: 64,
        n_layers: 2,
        context_length: 128,
        vocab_size: tok.vocab_size() as usize,
        ..TransformerConfig::preset("tiny")?
    };
    let hyper = TrainHyper {
        lr: 3e-3,
        warmup_steps: 20,
        ..TrainHyper::default()
    };

    // unlabeled stream for the language model
    let mut lm_text = Corpus::new("lm");
    lm_text.register(&Label::new(0, "lm"))?;
    for s in train.sequences() {
        lm_text.push(TextSequence { label: 0, ..s.clone() })?;
    }
    let (lm_shards, _) = pack_to_shards(&lm_text, &tok, cfg.context_length, 1 << 20)?;
    let lm: Transformer = build_transformer(&cfg, HeadMode::LmHead, 3)?;
    let (lm, r) = pretrain_lm(lm, &lm_shards, &hyper)?;
    println!("pretrain: {} steps, loss {:.3} -> {:.3}", r.steps, r.initial_loss().unwrap(), r.final_loss().unwrap());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("lm.ckpt");
    save_checkpoint(&lm, &serde_json::json!({"note": "example"}), &path)?;
    let (lm, meta) = load_checkpoint::<f32>(&path)?;
    println!("reloaded checkpoint, metadata {meta}");

    let (shards, _) = pack_to_shards(&train, &tok, cfg.context_length, 1 << 20)?;
    let body = lm.body_checksum();
    let probe_hyper = TrainHyper { lr: 1e-2, ..hyper.clone() };
    let (probe, _) = linear_probe(lm.clone(), 3, &shards, &probe_hyper)?;
    assert_eq!(body, probe.body_checksum());
    let acc = evaluate(&TransformerClassifier::new(&probe, &tok)?, &test)?.accuracy;
    println!("linear probe (frozen body {body:016x}): {:.2}%", 100.0 * acc);

    let (tuned, _) = finetune_classifier(lm.replace_head(3)?, &shards, &hyper, false)?;
    let acc = evaluate(&TransformerClassifier::new(&tuned, &tok)?, &test)?.accuracy;
    println!("fine-tuned from the language model: {:.2}%", 100.0 * acc);
    Ok(())
}
