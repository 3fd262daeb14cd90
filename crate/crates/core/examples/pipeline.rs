//! Drive the command-line pipeline from code: write a config, then run
//! `synth`, `pack`, `train` and `eval` through the same entry points as the
//! `dsclf` binary.
//!
//!     cargo run --release --example pipeline

use clap::Parser;
use dsclf::cli::{run, Cli};
use dsclf::config::{ClassifierKind, RunConfig};

fn step(config: &std::path::Path, args: &[&str]) -> anyhow::Result<()> {
    let mut argv = vec!["dsclf", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    println!("$ {}", argv.join(" "));
    run(Cli::try_parse_from(argv)?)?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::tiny(dir.path().join("run"));
    if let Some(s) = cfg.synth.as_mut() {
        s.n_train = 1000;
        s.n_test = 200;
    }
    let path = dir.path().join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()?)?;
    println!("config hash {}", cfg.hash());

    step(&path, &["synth"])?;
    step(&path, &["stats"])?;
    step(&path, &["pack"])?;
    step(&path, &["train"])?;
    step(&path, &["eval", "--mode", "whole,majority"])?;
    // already done: prints an up-to-date record and does nothing
    step(&path, &["train"])?;

    cfg.model.classifier = ClassifierKind::Bow;
    std::fs::write(&path, cfg.to_toml()?)?;
    step(&path, &["train"])?;
    step(&path, &["eval"])?;
    Ok(())
}
