//! Bag-of-words and shallow n-gram baselines on the subtle-bias benchmark.
//!
//!     cargo run --release --example baselines

use dsclf::corpus::bench::{build_benchmark, subtle_bias_domains, SubtleBias};
use dsclf::eval::{evaluate, TextClassifier};
use dsclf::model::{bow_train, shallow_train, BowHyper, ShallowHyper};
use dsclf::transforms::strip_formatting;

fn main() -> anyhow::Result<()> {
    let specs = subtle_bias_domains(&SubtleBias::default(), 11)?;
    let (train, test) = build_benchmark(&specs, 5000, 1000)?;

    let bow = bow_train(&train, &BowHyper::default())?;
    let shallow = shallow_train(&train, &ShallowHyper::default())?;
    let r = evaluate(&bow, &test)?;
    println!("bag of words");
    print!("{}", r.to_table());
    let r = evaluate(&shallow, &test)?;
    println!("\nshallow n-gram");
    print!("{}", r.to_table());

    // word order does not matter to the bag of words
    let doc = &test.sequences()[0].text;
    let mut words: Vec<&str> = doc.split_whitespace().collect();
    words.reverse();
    assert_eq!(bow.predict(doc)?, bow.predict(&words.join(" "))?);

    // neither does layout once it is stripped
    let flat = strip_formatting(doc);
    println!("\nstripped: {}", &flat[..flat.len().min(120)]);
    println!("shallow on original {} / stripped {}", shallow.predict(doc)?, shallow.predict(&flat)?);
    Ok(())
}
