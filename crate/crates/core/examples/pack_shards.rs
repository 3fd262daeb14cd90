//! Tokenize a corpus, pack it into fixed-length rows and round-trip the
//! shards through disk.
//!
//!     cargo run --release --example pack_shards

use dsclf::corpus::bench::separable_domains;
use dsclf::corpus::{generate_synthetic_corpus, Label, LengthDist};
use dsclf::packing::{pack_corpus, read_shard, Shard};
use dsclf::tokenizer::Tokenizer;

fn main() -> anyhow::Result<()> {
    let specs = separable_domains(2, 30, LengthDist::Uniform { min: 20, max: 200 }, 1);
    let a = generate_synthetic_corpus(&specs[0], &Label::new(0, "a"), 500)?;
    let b = generate_synthetic_corpus(&specs[1], &Label::new(1, "b"), 500)?;
    let corpus = dsclf::corpus::Corpus::merge("ab", &[&a, &b])?;

    let tok = Tokenizer::fit(corpus.sequences().iter().map(|s| s.text.as_str()), 1000, 1);
    let text = &corpus.sequences()[0].text;
    let ids = tok.encode(text);
    assert_eq!(tok.decode(&ids)?, *text);
    println!("first document: {} bytes -> {} tokens", text.len(), ids.len());

    let dir = tempfile::tempdir()?;
    let report = pack_corpus(&corpus, &tok, 256, 64, dir.path())?;
    for (label, s) in &report.per_label {
        println!("label {label}: {} rows, {} trailing tokens dropped", s.rows, s.dropped_tokens);
    }
    for info in &report.shards {
        let back = read_shard(&info.path)?;
        assert_eq!(back.row_count(), info.rows);
        println!(
            "{} rows={} partial={} crc={:016x}",
            info.path.file_name().unwrap().to_string_lossy(),
            info.rows,
            info.partial,
            info.checksum
        );
    }

    // a flipped byte is caught by the trailer checksum
    let mut bytes = std::fs::read(&report.shards[0].path)?;
    bytes[40] ^= 1;
    println!("corrupted shard: {}", Shard::from_bytes(&bytes).unwrap_err());
    Ok(())
}
