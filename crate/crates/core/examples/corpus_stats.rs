//! Generate three synthetic domains, then print token-length statistics and
//! a histogram for each.
//!
//!     cargo run --release --example corpus_stats

use dsclf::corpus::bench::{build_benchmark, subtle_bias_domains, SubtleBias};
use dsclf::corpus::{compute_length_stats, emit_histogram, stats_table, Corpus, Label};
use dsclf::tokenizer::Tokenizer;

fn main() -> anyhow::Result<()> {
    let specs = subtle_bias_domains(&SubtleBias::default(), 7)?;
    let (train, _) = build_benchmark(&specs, 2000, 0)?;
    let tok = Tokenizer::fit(train.sequences().iter().map(|s| s.text.as_str()), 2000, 2);
    println!("tokenizer: {} ids", tok.vocab_size());

    let mut rows = Vec::new();
    for label in train.labels() {
        let mut part = Corpus::new(label.name.clone());
        part.register(&label)?;
        for s in train.sequences().iter().filter(|s| s.label == label.id) {
            part.push(s.clone())?;
        }
        rows.push((label.name.clone(), compute_length_stats(&part, &tok)?));
        if label.id == 0 {
            println!("\n{} token lengths:", label.name);
            print!("{}", emit_histogram(&part, &tok, 25, 250)?.to_table());
        }
    }
    println!();
    print!("{}", stats_table(&rows));

    // the same numbers for an ad-hoc corpus
    let mut tiny = Corpus::new("tiny");
    tiny.register(&Label::new(0, "tiny"))?;
    for t in ["one two three", "four five", "six"] {
        tiny.push(dsclf::corpus::TextSequence {
            text: t.into(),
            label: 0,
            source_id: String::new(),
        })?;
    }
    let s = compute_length_stats(&tiny, &Tokenizer::bytes_only())?;
    println!("\nbyte-level lengths of a 3-doc corpus: mean {:.2}, median {}", s.mean, s.median);
    Ok(())
}
