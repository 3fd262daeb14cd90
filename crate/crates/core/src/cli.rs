//! The `dsclf` command line: one subcommand per pipeline stage, each
//! driven by a [`RunConfig`] and writing stamped reports under its output
//! directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::config::{
    ensure_parent, is_up_to_date, write_report, write_stamp, BenchmarkKind, ClassifierKind, RunConfig,
};
use crate::corpus::bench::{build_benchmark, separable_domains, subtle_bias_domains};
use crate::corpus::{compute_length_stats, emit_histogram, stats_table};
use crate::corpus::{load_corpus, Corpus, CorpusFormat, Label, TextSequence};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, evaluate_aggregated, evaluate_by_length, evaluate_majority, run_scaling_grid, EvalMode,
    EvalReport, GridAxis, TextClassifier, TransformerClassifier,
};
use crate::mixture::{estimate_mixture, first_token_distribution, generate_sequences, write_generated, GenerateOptions};
use crate::model::{
    bow_train, build_transformer, load_checkpoint, save_checkpoint, shallow_train, BowModel, HeadMode, ShallowModel,
    Transformer,
};
use crate::packing::{pack_corpus, pack_to_shards, read_shard, Shard};
use crate::tokenizer::Tokenizer;
use crate::train::{finetune_classifier, linear_probe, pretrain_lm, TrainHyper};
use crate::transforms::{
    categorize_batch, read_batch, rewrite_batch, strip_formatting, write_batch, BatchResult, ChatClient,
    ChatClientConfig, MockBackend, RewritePrompt,
};

#[derive(Debug, Parser)]
#[command(name = "dsclf", version, about = "Dataset classification for pretraining corpora")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Rerun a stage even when its stamped outputs exist.
    #[arg(long, global = true)]
    pub force: bool,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override the master seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a starter config for the bundled synthetic benchmark.
    Init {
        path: PathBuf,
        #[arg(long, default_value = "run")]
        output_dir: PathBuf,
    },
    /// Token-length statistics per dataset.
    Stats,
    /// Token-length histogram per dataset.
    Histogram {
        #[arg(long, default_value_t = 200)]
        bucket_width: usize,
        #[arg(long, default_value_t = 2000)]
        cap: usize,
    },
    /// Generate the synthetic benchmark named in the config.
    Synth,
    /// Fit the tokenizer and pack training splits into shards.
    Pack,
    /// Pretrain a language model on the training splits.
    Pretrain,
    /// Train the configured classifier.
    Train,
    /// Evaluate the classifier on the test splits.
    Eval {
        /// whole, majority, aggregated, by-length (comma separated)
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
    },
    /// Train a class head on the frozen pretrained body.
    Probe,
    /// Remove newlines and list formatting from a jsonl batch.
    Strip {
        input: PathBuf,
        output: PathBuf,
    },
    /// Rewrite a jsonl batch through the chat endpoint.
    Rewrite {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "1")]
        prompt: String,
        /// Echo backend instead of the network.
        #[arg(long)]
        mock: bool,
    },
    /// Assign a topic category to every record of a jsonl batch.
    Categorize {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        mock: bool,
    },
    /// Sample sequences from the pretrained language model.
    Generate,
    /// Classify sequences and report class proportions.
    EstimateMixture {
        /// jsonl with a `text` field; defaults to the generated sequences.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Accuracy over training-token budgets.
    Grid,
}

/// Machine-parseable failure line written to stderr.
pub fn error_record(command: &str, err: &Error) -> String {
    serde_json::json!({
        "error": {
            "command": command,
            "kind": err.kind(),
            "message": err.to_string(),
        }
    })
    .to_string()
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io { .. } => 3,
        Error::Endpoint(_) => 4,
        _ => 1,
    }
}

/// Entry point of the binary.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let name = command_name(&cli.command);
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_record(name, &e));
            exit_code(&e)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Init { .. } => "init",
        Command::Stats => "stats",
        Command::Histogram { .. } => "histogram",
        Command::Synth => "synth",
        Command::Pack => "pack",
        Command::Pretrain => "pretrain",
        Command::Train => "train",
        Command::Eval { .. } => "eval",
        Command::Probe => "probe",
        Command::Strip { .. } => "strip",
        Command::Rewrite { .. } => "rewrite",
        Command::Categorize { .. } => "categorize",
        Command::Generate => "generate",
        Command::EstimateMixture { .. } => "estimate-mixture",
        Command::Grid => "grid",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialised; --threads ignored");
        }
    }
    let load = || -> Result<RunConfig> {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --config".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    };
    let optional = || -> Result<Option<RunConfig>> { cli.config.as_ref().map(|_| load()).transpose() };
    let name = command_name(&cli.command);
    match &cli.command {
        Command::Init { path, output_dir } => init(path, output_dir),
        Command::Strip { input, output } => strip(input, output),
        Command::Rewrite {
            input,
            output,
            prompt,
            mock,
        } => {
            let prompt: RewritePrompt = prompt.parse()?;
            let (client, ledger) = make_client(optional()?, *mock, MockBackend::identity())?;
            let records = read_batch(input)?;
            let par = client.1;
            let results = rewrite_batch(&records, prompt, &client.0, par)?;
            finish_batch(output, &results, &client.0, ledger)
        }
        Command::Categorize { input, output, mock } => {
            let (client, ledger) = make_client(optional()?, *mock, MockBackend::constant("Other"))?;
            let records = read_batch(input)?;
            let results = categorize_batch(&records, &client.0, client.1)?;
            finish_batch(output, &results, &client.0, ledger)
        }
        cmd => {
            let cfg = load()?;
            if !cli.force && is_up_to_date(&cfg, &stage_key(name, cmd)) {
                println!("{}", serde_json::json!({"stage": name, "status": "up-to-date", "config_hash": cfg.hash()}));
                return Ok(());
            }
            let outputs = match cmd {
                Command::Stats => stats(&cfg)?,
                Command::Histogram { bucket_width, cap } => histogram(&cfg, *bucket_width, *cap)?,
                Command::Synth => synth(&cfg)?,
                Command::Pack => pack(&cfg)?,
                Command::Pretrain => pretrain(&cfg)?,
                Command::Train => train(&cfg)?,
                Command::Eval { mode } => eval(&cfg, mode)?,
                Command::Probe => probe(&cfg)?,
                Command::Generate => generate(&cfg)?,
                Command::EstimateMixture { input } => mixture(&cfg, input.as_deref())?,
                Command::Grid => grid(&cfg)?,
                _ => unreachable!("handled above"),
            };
            write_stamp(&cfg, &stage_key(name, cmd), &outputs)
        }
    }
}

/// Stamp name; stages with flags that change their output include them.
fn stage_key(name: &str, cmd: &Command) -> String {
    match cmd {
        Command::Histogram { bucket_width, cap } => format!("{name}-{bucket_width}-{cap}"),
        Command::Eval { mode } if !mode.is_empty() => format!("{name}-{}", mode.join("+")),
        Command::EstimateMixture { input: Some(p) } => {
            format!("{name}-{}", &hex::encode(Sha256::digest(p.to_string_lossy().as_bytes()))[..12])
        }
        _ => name.to_string(),
    }
}

/// Per-stage seed derived from the master seed.
pub fn stage_seed(cfg: &RunConfig, stage: &str) -> u64 {
    let h = Sha256::digest(format!("{}:{stage}", cfg.seed).as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn init(path: &Path, output_dir: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::InvalidArgument(format!("{} exists", path.display())));
    }
    let mut cfg = RunConfig::tiny(output_dir);
    // dataset paths relative to the output dir keep the file portable
    for d in &mut cfg.datasets {
        d.train = output_dir.join(format!("data/{}.train.jsonl", d.name));
        d.test = Some(output_dir.join(format!("data/{}.test.jsonl", d.name)));
    }
    ensure_parent(path)?;
    std::fs::write(path, cfg.to_toml()?).map_err(|e| Error::io(path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, test: bool) -> Result<Corpus> {
    let mut parts = Vec::new();
    for d in &cfg.datasets {
        let path = if test {
            d.test
                .as_ref()
                .ok_or_else(|| Error::Config(format!("dataset {} has no test split", d.name)))?
        } else {
            &d.train
        };
        let (c, report) = load_corpus(path, &d.format, &Label::new(d.label, d.name.clone()))?;
        if !report.malformed.is_empty() {
            log::warn!("{}: {} malformed records skipped", path.display(), report.malformed.len());
        }
        parts.push(c);
    }
    Corpus::merge(if test { "test" } else { "train" }, &parts.iter().collect::<Vec<_>>())
}

fn tokenizer_path(cfg: &RunConfig) -> PathBuf {
    cfg.path("tokenizer.json")
}

/// Load the run's tokenizer, fitting it on the training splits first if
/// it is missing or stale.
fn ensure_tokenizer(cfg: &RunConfig, train: &Corpus) -> Result<Tokenizer> {
    let path = tokenizer_path(cfg);
    if path.exists() && is_up_to_date(cfg, "tokenizer") {
        return Tokenizer::load(&path);
    }
    let t = &cfg.tokenizer;
    let tok = Tokenizer::fit(train.sequences().iter().map(|s| s.text.as_str()), t.max_words, t.min_count);
    ensure_parent(&path)?;
    tok.save(&path)?;
    write_stamp(cfg, "tokenizer", &[path])?;
    Ok(tok)
}

fn load_tokenizer(cfg: &RunConfig) -> Result<Tokenizer> {
    let path = tokenizer_path(cfg);
    if !path.exists() {
        return Err(Error::Config(format!("{} is missing; run `pack` first", path.display())));
    }
    Tokenizer::load(&path)
}

fn stats(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let train = load_split(cfg, false)?;
    let tok = ensure_tokenizer(cfg, &train)?;
    let mut rows = Vec::new();
    for d in &cfg.datasets {
        let mut c = Corpus::new(d.name.clone());
        c.register(&Label::new(d.label, d.name.clone()))?;
        for s in train.sequences().iter().filter(|s| s.label == d.label) {
            c.push(s.clone())?;
        }
        rows.push((d.name.clone(), compute_length_stats(&c, &tok)?));
    }
    let table = stats_table(&rows);
    print!("{table}");
    write_report(cfg, "stats", &cfg.path("reports/stats"), &rows, &table)
}

fn histogram(cfg: &RunConfig, bucket_width: usize, cap: usize) -> Result<Vec<PathBuf>> {
    let train = load_split(cfg, false)?;
    let tok = ensure_tokenizer(cfg, &train)?;
    let mut table = String::new();
    let mut hists = Vec::new();
    for d in &cfg.datasets {
        let mut c = Corpus::new(d.name.clone());
        c.register(&Label::new(d.label, d.name.clone()))?;
        for s in train.sequences().iter().filter(|s| s.label == d.label) {
            c.push(s.clone())?;
        }
        let h = emit_histogram(&c, &tok, bucket_width, cap)?;
        table += &format!("== {}\n{}", d.name, h.to_table());
        hists.push((d.name.clone(), h));
    }
    print!("{table}");
    write_report(cfg, "histogram", &cfg.path("reports/histogram"), &hists, &table)
}

fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let s = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no [synth] section".into()))?;
    let seed = stage_seed(cfg, "synth");
    let k = cfg.datasets.len();
    let specs = match s.benchmark {
        BenchmarkKind::Separable => separable_domains(k, s.words_per_domain, s.length.clone(), seed),
        BenchmarkKind::SubtleBias => {
            if k != 3 {
                return Err(Error::Config("the subtle-bias benchmark has exactly three datasets".into()));
            }
            subtle_bias_domains(&s.subtle, seed)?
        }
    };
    let (train, test) = build_benchmark(&specs, s.n_train, s.n_test)?;
    let mut outputs = Vec::new();
    for (i, d) in cfg.datasets.iter().enumerate() {
        let i = i as u16;
        for (corpus, path) in [(&train, Some(&d.train)), (&test, d.test.as_ref())] {
            let Some(path) = path else { continue };
            let mut part = Corpus::new(d.name.clone());
            part.register(&Label::new(d.label, d.name.clone()))?;
            for seq in corpus.sequences().iter().filter(|x| x.label == i) {
                part.push(TextSequence {
                    label: d.label,
                    ..seq.clone()
                })?;
            }
            ensure_parent(path)?;
            part.write_jsonl(path)?;
            outputs.push(path.clone());
        }
    }
    println!("wrote {} files ({} train / {} test per domain)", outputs.len(), s.n_train, s.n_test);
    Ok(outputs)
}

fn context_length(cfg: &RunConfig, tok: &Tokenizer) -> Result<usize> {
    Ok(cfg
        .model
        .transformer_config(tok.vocab_size() as usize, cfg.n_classes())?
        .context_length)
}

fn pack(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let train = load_split(cfg, false)?;
    let tok = ensure_tokenizer(cfg, &train)?;
    let ctx = context_length(cfg, &tok)?;
    let dir = cfg.path("shards/train");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let report = pack_corpus(&train, &tok, ctx, cfg.pack.rows_per_shard, &dir)?;
    let mut table = String::from("label | rows | dropped tokens\n");
    for (l, s) in &report.per_label {
        table += &format!("{l:>5} | {:>4} | {}\n", s.rows, s.dropped_tokens);
    }
    table += &format!("{} shards in {}\n", report.shards.len(), dir.display());
    print!("{table}");
    let mut out = write_report(cfg, "pack", &cfg.path("reports/pack"), &report, &table)?;
    out.extend(report.shards.iter().map(|s| s.path.clone()));
    out.push(tokenizer_path(cfg));
    Ok(out)
}

fn load_shards(dir: &Path) -> Result<Vec<Shard>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "shard"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no shards in {}; run `pack` first", dir.display())));
    }
    paths.iter().map(|p| read_shard(p)).collect()
}

fn train_hyper(cfg: &RunConfig, base: &TrainHyper, stage: &str) -> TrainHyper {
    TrainHyper {
        seed: base.seed ^ stage_seed(cfg, stage),
        deterministic: base.deterministic || cfg.deterministic,
        ..base.clone()
    }
}

fn lm_path(cfg: &RunConfig) -> PathBuf {
    cfg.path("models/lm.ckpt")
}

fn pretrain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let train = load_split(cfg, false)?;
    let tok = load_tokenizer(cfg)?;
    let lm_label = Label::new(0, "lm");
    let mut lm_corpus = Corpus::new("lm");
    lm_corpus.register(&lm_label)?;
    for s in train.sequences() {
        lm_corpus.push(TextSequence {
            label: 0,
            ..s.clone()
        })?;
    }
    for p in &cfg.pretrain.extra {
        let (c, _) = load_corpus(p, &cfg.pretrain.format, &lm_label)?;
        for s in c.sequences() {
            lm_corpus.push(s.clone())?;
        }
    }
    let mcfg = cfg.model.transformer_config(tok.vocab_size() as usize, cfg.n_classes())?;
    let (shards, _) = pack_to_shards(&lm_corpus, &tok, mcfg.context_length, cfg.pack.rows_per_shard)?;
    let lm: Transformer<f32> = build_transformer(&mcfg, HeadMode::LmHead, stage_seed(cfg, "pretrain-init"))?;
    let mut hyper = train_hyper(cfg, &cfg.pretrain.hyper, "pretrain");
    if let Some(k) = cfg.pretrain.tokens_per_param {
        let rows = shards.iter().map(|s| s.row_count()).sum();
        hyper = hyper.for_token_budget((k * lm.n_params() as f64) as usize, rows, mcfg.context_length)?;
    }
    let (lm, report) = pretrain_lm(lm, &shards, &hyper)?;
    let path = lm_path(cfg);
    ensure_parent(&path)?;
    save_checkpoint(&lm, &cfg.metadata("pretrain"), &path)?;
    let table = format!(
        "steps {} tokens {} loss {:.4} -> {:.4}\n",
        report.steps,
        report.tokens_seen,
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN)
    );
    print!("{table}");
    let mut out = write_report(cfg, "pretrain", &cfg.path("reports/pretrain"), &report, &table)?;
    out.push(path);
    Ok(out)
}

fn classifier_path(cfg: &RunConfig) -> PathBuf {
    cfg.path(match cfg.model.classifier {
        ClassifierKind::Transformer => "models/classifier.ckpt",
        ClassifierKind::Bow => "models/bow.json",
        ClassifierKind::Shallow => "models/shallow.json",
    })
}

fn train_transformer(cfg: &RunConfig, tok: &Tokenizer, shards: &[Shard], hyper: &TrainHyper) -> Result<(Transformer<f32>, crate::train::TrainReport)> {
    let n = cfg.n_classes();
    if cfg.model.finetune {
        let (lm, _) = load_checkpoint::<f32>(&lm_path(cfg))?;
        finetune_classifier(lm.replace_head(n)?, shards, hyper, false)
    } else {
        let mcfg = cfg.model.transformer_config(tok.vocab_size() as usize, n)?;
        let m = build_transformer(&mcfg, HeadMode::ClassHead { n_classes: n }, stage_seed(cfg, "train-init"))?;
        finetune_classifier(m, shards, hyper, true)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_vec(v)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&data)?)
}

fn train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let path = classifier_path(cfg);
    let table = match cfg.model.classifier {
        ClassifierKind::Transformer => {
            let tok = load_tokenizer(cfg)?;
            let shards = load_shards(&cfg.path("shards/train"))?;
            let hyper = train_hyper(cfg, &cfg.train, "train");
            let (m, report) = train_transformer(cfg, &tok, &shards, &hyper)?;
            ensure_parent(&path)?;
            save_checkpoint(&m, &cfg.metadata("train"), &path)?;
            let table = format!(
                "{:?}: steps {} tokens {} loss {:.4} -> {:.4}\n",
                report.mode,
                report.steps,
                report.tokens_seen,
                report.initial_loss().unwrap_or(f64::NAN),
                report.final_loss().unwrap_or(f64::NAN)
            );
            return finish_train(cfg, &report, &table, path);
        }
        ClassifierKind::Bow => {
            let m = bow_train(&load_split(cfg, false)?, &cfg.bow)?;
            write_json(&path, &m)?;
            format!("bag of words: {} features, {} classes\n", m.vocab_size(), m.n_classes())
        }
        ClassifierKind::Shallow => {
            let m = shallow_train(&load_split(cfg, false)?, &cfg.shallow)?;
            write_json(&path, &m)?;
            "shallow n-gram classifier trained\n".to_string()
        }
    };
    finish_train(cfg, &serde_json::json!({"classifier": cfg.model.classifier}), &table, path)
}

fn finish_train<T: serde::Serialize>(cfg: &RunConfig, report: &T, table: &str, model: PathBuf) -> Result<Vec<PathBuf>> {
    print!("{table}");
    let mut out = write_report(cfg, "train", &cfg.path("reports/train"), report, table)?;
    out.push(model);
    Ok(out)
}

enum Loaded {
    Transformer(Transformer<f32>, Tokenizer),
    Bow(BowModel),
    Shallow(ShallowModel),
}

fn load_classifier(cfg: &RunConfig) -> Result<Loaded> {
    let path = classifier_path(cfg);
    if !path.exists() {
        return Err(Error::Config(format!("{} is missing; run `train` first", path.display())));
    }
    Ok(match cfg.model.classifier {
        ClassifierKind::Transformer => Loaded::Transformer(load_checkpoint::<f32>(&path)?.0, load_tokenizer(cfg)?),
        ClassifierKind::Bow => Loaded::Bow(read_json(&path)?),
        ClassifierKind::Shallow => Loaded::Shallow(read_json(&path)?),
    })
}

fn with_classifier<T>(loaded: &Loaded, f: impl FnOnce(&dyn TextClassifier) -> Result<T>) -> Result<T> {
    match loaded {
        Loaded::Transformer(m, tok) => f(&TransformerClassifier::new(m, tok)?),
        Loaded::Bow(m) => f(m),
        Loaded::Shallow(m) => f(m),
    }
}

fn mode_name(m: EvalMode) -> &'static str {
    match m {
        EvalMode::WholeSeq => "whole-seq",
        EvalMode::Majority => "majority",
        EvalMode::Aggregated => "aggregated",
        EvalMode::ByLength => "by-length",
    }
}

fn eval_mode(cfg: &RunConfig, loaded: &Loaded, test: &Corpus, mode: EvalMode) -> Result<EvalReport> {
    match (mode, loaded) {
        (EvalMode::WholeSeq, _) => with_classifier(loaded, |c| evaluate(c, test)),
        (EvalMode::ByLength, _) => {
            let tok = match loaded {
                Loaded::Transformer(_, t) => t.clone(),
                _ => load_tokenizer(cfg)?,
            };
            with_classifier(loaded, |c| evaluate_by_length(c, &tok, test, cfg.eval.buckets))
        }
        (EvalMode::Majority, Loaded::Transformer(m, t)) => evaluate_majority(&TransformerClassifier::new(m, t)?, test),
        (EvalMode::Aggregated, Loaded::Transformer(m, t)) => evaluate_aggregated(&TransformerClassifier::new(m, t)?, test),
        (m, _) => Err(Error::InvalidArgument(format!(
            "{} evaluation needs a transformer classifier",
            mode_name(m)
        ))),
    }
}

fn eval(cfg: &RunConfig, modes: &[String]) -> Result<Vec<PathBuf>> {
    let modes: Vec<EvalMode> = if modes.is_empty() {
        cfg.eval.modes.clone()
    } else {
        modes.iter().map(|m| m.parse()).collect::<Result<_>>()?
    };
    let loaded = load_classifier(cfg)?;
    let test = load_split(cfg, true)?;
    let mut out = Vec::new();
    for mode in modes {
        let report = eval_mode(cfg, &loaded, &test, mode)?.with_metadata(cfg.metadata("eval"));
        let table = report.to_table();
        print!("{table}");
        let stem = cfg.path(&format!("reports/eval-{}", mode_name(mode)));
        out.extend(write_report(cfg, "eval", &stem, &report, &table)?);
    }
    Ok(out)
}

fn probe(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let tok = load_tokenizer(cfg)?;
    let shards = load_shards(&cfg.path("shards/train"))?;
    let (lm, _) = load_checkpoint::<f32>(&lm_path(cfg))?;
    let body_before = lm.body_checksum();
    let hyper = train_hyper(cfg, &cfg.train, "probe");
    let (m, report) = linear_probe(lm, cfg.n_classes(), &shards, &hyper)?;
    let body_after = m.body_checksum();
    if body_before != body_after {
        return Err(Error::Shape("linear probe changed the frozen body".into()));
    }
    let path = cfg.path("models/probe.ckpt");
    ensure_parent(&path)?;
    save_checkpoint(&m, &cfg.metadata("probe"), &path)?;
    let test = load_split(cfg, true)?;
    let eval = evaluate(&TransformerClassifier::new(&m, &tok)?, &test)?;
    let table = format!(
        "body checksum {body_before:016x} (unchanged)\nsteps {}\n{}",
        report.steps,
        eval.to_table()
    );
    print!("{table}");
    let doc = serde_json::json!({"train": report, "eval": eval, "body_checksum": body_before});
    let mut out = write_report(cfg, "probe", &cfg.path("reports/probe"), &doc, &table)?;
    out.push(path);
    Ok(out)
}

fn generated_path(cfg: &RunConfig) -> PathBuf {
    cfg.path("generated/generated.jsonl")
}

fn generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let tok = load_tokenizer(cfg)?;
    let (lm, _) = load_checkpoint::<f32>(&lm_path(cfg))?;
    let train = load_split(cfg, false)?;
    let dist = first_token_distribution(&train, &tok)?;
    let opts = GenerateOptions {
        seed: cfg.generate.seed ^ stage_seed(cfg, "generate"),
        ..cfg.generate.clone()
    };
    let (corpus, meta) = generate_sequences(&lm, &tok, &dist, &opts, &Label::new(0, "generated"))?;
    let path = generated_path(cfg);
    ensure_parent(&path)?;
    write_generated(&corpus, &meta, &path)?;
    println!("wrote {} sequences to {}", corpus.len(), path.display());
    Ok(vec![path.clone(), path.with_extension("meta.json")])
}

fn mixture(cfg: &RunConfig, input: Option<&Path>) -> Result<Vec<PathBuf>> {
    let path = input.map_or_else(|| generated_path(cfg), Path::to_path_buf);
    let (seqs, _) = load_corpus(&path, &CorpusFormat::default(), &Label::new(0, "input"))?;
    let texts: Vec<String> = seqs.sequences().iter().map(|s| s.text.clone()).collect();
    let classes: Vec<Label> = cfg.datasets.iter().map(|d| Label::new(d.label, d.name.clone())).collect();
    let loaded = load_classifier(cfg)?;
    let est = with_classifier(&loaded, |c| estimate_mixture(c, &classes, &texts))?;
    let table = est.to_table(None);
    print!("{table}");
    write_report(cfg, "estimate-mixture", &cfg.path("reports/mixture"), &est, &table)
}

fn grid(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let tok = load_tokenizer(cfg)?;
    let shards = load_shards(&cfg.path("shards/train"))?;
    let test = load_split(cfg, true)?;
    let rows: usize = shards.iter().map(|s| s.row_count()).sum();
    let ctx = context_length(cfg, &tok)?;
    let points: Vec<(String, f64)> = cfg
        .grid
        .token_budgets
        .iter()
        .map(|&b| (format!("{}M", b as f64 / 1e6), b as f64))
        .collect();
    let base = train_hyper(cfg, &cfg.train, "grid");
    let g = run_scaling_grid(GridAxis::TrainTokens, &points, |name, budget| {
        let hyper = base.for_token_budget(budget as usize, rows, ctx)?;
        let (m, r) = train_transformer(cfg, &tok, &shards, &hyper)?;
        let acc = evaluate(&TransformerClassifier::new(&m, &tok)?, &test)?.accuracy;
        log::info!("grid {name}: {} tokens, accuracy {acc:.4}", r.tokens_seen);
        Ok(acc)
    })?;
    let table = g.to_table();
    print!("{table}");
    write_report(cfg, "grid", &cfg.path("reports/grid"), &g, &table)
}

fn strip(input: &Path, output: &Path) -> Result<()> {
    let records = read_batch(input)?;
    let results: Vec<BatchResult> = records
        .iter()
        .map(|r| BatchResult {
            id: r.id.clone(),
            text: strip_formatting(&r.text),
            status: "ok".into(),
        })
        .collect();
    write_batch(output, &results)?;
    println!("{}", serde_json::json!({"stage": "strip", "records": results.len()}));
    Ok(())
}

type Client = (ChatClient, usize);

fn make_client(cfg: Option<RunConfig>, mock: bool, mock_backend: MockBackend) -> Result<(Client, Option<Arc<MockBackend>>)> {
    let (client_cfg, par) = match cfg {
        Some(c) => (c.transform.client, c.transform.parallelism),
        None => (ChatClientConfig::default(), 4),
    };
    if mock {
        let backend = Arc::new(mock_backend);
        let client = ChatClient::new(client_cfg, Box::new(backend.clone()))?;
        Ok(((client, par), Some(backend)))
    } else {
        Ok(((ChatClient::http(client_cfg)?, par), None))
    }
}

fn finish_batch(output: &Path, results: &[BatchResult], client: &ChatClient, ledger: Option<Arc<MockBackend>>) -> Result<()> {
    write_batch(output, results)?;
    let costs = client.costs();
    let failed = results.iter().filter(|r| r.status.starts_with("error")).count();
    let flagged = results.iter().filter(|r| r.status == "flagged").count();
    let record = serde_json::json!({
        "records": results.len(),
        "failed": failed,
        "flagged": flagged,
        "costs": costs,
        "mock_ledger": ledger.map(|l| l.ledger()),
    });
    let side = output.with_extension("costs.json");
    std::fs::write(&side, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&side, e))?;
    println!("{record}");
    if failed > 0 {
        return Err(Error::Endpoint(format!("{failed} of {} records failed", results.len())));
    }
    Ok(())
}
