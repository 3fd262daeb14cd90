//! Train a language model on a 60/30/10 mixture of three domains, sample
//! from it with first-token prompting, and recover the mixture with a
//! domain classifier that also knows a fourth, absent domain.
//!
//!     cargo run --release --example mixture_estimation

use dsclf::corpus::bench::separable_domains;
use dsclf::corpus::{generate_synthetic_corpus, Corpus, Label, LengthDist};
use dsclf::eval::evaluate;
use dsclf::mixture::{estimate_mixture, first_token_distribution, generate_sequences, GenerateOptions};
use dsclf::model::{bow_train, build_transformer, BowHyper, HeadMode, Transformer, TransformerConfig};
use dsclf::packing::pack_to_shards;
use dsclf::tokenizer::Tokenizer;
use dsclf::train::{pretrain_lm, TrainHyper};

fn main() -> anyhow::Result<()> {
    let specs = separable_domains(4, 40, LengthDist::Uniform { min: 10, max: 40 }, 3);
    let mix = [0.6, 0.3, 0.1];
    let n_docs = 10_000;

    let lm_label = Label::new(0, "mix");
    let mut lm_corpus = Corpus::new("mix");
    lm_corpus.register(&lm_label)?;
    for (spec, p) in specs.iter().zip(mix) {
        let part = generate_synthetic_corpus(spec, &lm_label, (p * n_docs as f64) as usize)?;
        for s in part.sequences() {
            lm_corpus.push(s.clone())?;
        }
    }
    let tok = Tokenizer::fit(lm_corpus.sequences().iter().map(|s| s.text.as_str()), 1000, 1);
    let cfg = TransformerConfig {
        hidden_dim: 64,
        n_layers: 2,
        context_length: 64,
        vocab_size: tok.vocab_size() as usize,
        ..TransformerConfig::preset("tiny")?
    };
    let (shards, _) = pack_to_shards(&lm_corpus, &tok, cfg.context_length, 1 << 20)?;
    let lm: Transformer = build_transformer(&cfg, HeadMode::LmHead, 1)?;
    let hyper = TrainHyper {
        lr: 3e-3,
        warmup_steps: 20,
        ..TrainHyper::default()
    };
    let (lm, r) = pretrain_lm(lm, &shards, &hyper)?;
    println!("language model: {} steps, final loss {:.3}", r.steps, r.final_loss().unwrap());

    let dist = first_token_distribution(&lm_corpus, &tok)?;
    let opts = GenerateOptions {
        n: 2048,
        max_len: 32,
        temperature: 1.0,
        seed: 9,
    };
    let (generated, meta) = generate_sequences(&lm, &tok, &dist, &opts, &Label::new(0, "generated"))?;
    println!("sampled {} sequences from model {:016x}", meta.n, meta.lm_checksum);
    println!("e.g. {:?}", generated.sequences()[0].text);

    // domain classifier over all four domains, trained on fresh samples
    let classes: Vec<Label> = (0..4).map(|i| Label::new(i, format!("domain{i}"))).collect();
    let parts: Vec<Corpus> = specs
        .iter()
        .zip(&classes)
        .map(|(s, l)| generate_synthetic_corpus(s, l, 1200))
        .collect::<Result<_, _>>()?;
    let (train_parts, test_parts): (Vec<_>, Vec<_>) = parts.iter().map(|c| c.split_per_label(1000)).unzip();
    let clf = bow_train(&Corpus::merge("train", &train_parts.iter().collect::<Vec<_>>())?, &BowHyper::default())?;
    let held_out = Corpus::merge("test", &test_parts.iter().collect::<Vec<_>>())?;
    println!("domain classifier held-out accuracy {:.2}%", 100.0 * evaluate(&clf, &held_out)?.accuracy);

    let texts: Vec<String> = generated.sequences().iter().map(|s| s.text.clone()).collect();
    let est = estimate_mixture(&clf, &classes, &texts)?;
    print!("{}", est.to_table(Some(&[0.6, 0.3, 0.1, 0.0])));
    Ok(())
}
