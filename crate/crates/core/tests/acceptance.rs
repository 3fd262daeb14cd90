//! Acceptance run: one PASS/FAIL line per criterion.
//!
//!     cargo test --release --test acceptance            # everything
//!     cargo test --release --test acceptance -- 5 10    # a subset
//!
//! Criteria listed in `KNOWN_FAILURES` still print FAIL when they fail but do
//! not change the exit status. Set `DSCLF_ACCEPTANCE_STRICT=1` to make them.

#[path = "common/mod.rs"]
mod common;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use dsclf::corpus::bench::{build_benchmark, separable_domains, subtle_bias_domains, SubtleBias};
use dsclf::corpus::{generate_synthetic_corpus, Corpus, Label, LengthDist, SyntheticDomainSpec, TextSequence};
use dsclf::eval::{evaluate, FnClassifier, TextClassifier, TransformerClassifier};
use dsclf::mixture::{estimate_mixture, first_token_distribution, generate_sequences, GenerateOptions};
use dsclf::model::{
    bow_featurize, bow_train, build_transformer, checkpoint_bytes, shallow_train, BowHyper, HeadMode, ShallowHyper,
    Transformer, TransformerConfig,
};
use dsclf::packing::{pack_to_shards, read_shard, write_shard, PackedRow, Shard};
use dsclf::tokenizer::Tokenizer;
use dsclf::train::{finetune_classifier, linear_probe, pretrain_lm, TrainHyper};
use dsclf::transforms::{
    categorize_batch, rewrite_batch, strip_formatting, BatchRecord, CallError, ChatClient, ChatClientConfig,
    MockBackend, RewritePrompt,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

const KNOWN_FAILURES: &[usize] = &[9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> anyhow::Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

type Check = fn() -> anyhow::Result<Outcome>;

fn main() {
    let criteria: [(usize, &str, Option<u64>, Check); 12] = [
        (1, "shard round trip", Some(60), shard_format),
        (2, "gradient check", Some(120), gradient_check),
        (3, "untrained classifier at chance", Some(120), chance_level),
        (4, "separable domains", Some(600), separable_recovery),
        (5, "subtle-bias ordering", Some(900), subtle_ordering),
        (6, "format stripping", Some(60), format_stripping),
        (7, "bag-of-words order invariance", Some(60), bow_order_invariance),
        (8, "mixture estimation", Some(600), mixture_estimation),
        (9, "linear probe", Some(300), linear_probe_contract),
        (10, "scaling trend", Some(1800), scaling_trend),
        (11, "determinism", None, determinism),
        (12, "chat client contract", None, client_contract),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var_os("DSCLF_ACCEPTANCE_STRICT").is_some();
    let mut failed = Vec::new();
    for (id, name, limit, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let result = check();
        let secs = t.elapsed().as_secs_f64();
        let (mut pass, mut detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if let Some(l) = limit {
            if secs > l as f64 {
                pass = false;
                detail += &format!("; over the {l}s budget");
            }
        }
        let budget = limit.map_or(String::new(), |l| format!(" / {l}s"));
        println!("{:>2} {} {name}: {detail} [{secs:.1}s{budget}]", id, if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(id);
        }
    }
    let unexpected: Vec<usize> = failed.iter().copied().filter(|id| strict || !KNOWN_FAILURES.contains(id)).collect();
    println!("{} failed {:?}, unexpected {:?}", failed.len(), failed, unexpected);
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}

fn desk_config(vocab: usize, context: usize) -> anyhow::Result<TransformerConfig> {
    Ok(TransformerConfig {
        hidden_dim: 64,
        n_layers: 2,
        context_length: context,
        vocab_size: vocab,
        ..TransformerConfig::preset("tiny")?
    })
}

fn desk_hyper() -> TrainHyper {
    TrainHyper {
        lr: 3e-3,
        warmup_steps: 20,
        ..TrainHyper::default()
    }
}

fn fit_tokenizer(corpus: &Corpus) -> Tokenizer {
    Tokenizer::fit(corpus.sequences().iter().map(|s| s.text.as_str()), 1000, 1)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn shard_format() -> anyhow::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dir = tempfile::tempdir()?;
    let mut undetected = 0;
    for i in 0..100 {
        let ctx = rng.gen_range(1..=64usize);
        let vocab = rng.gen_range(257..70_000u32);
        let label = rng.gen_range(0..8u16);
        let rows: Vec<PackedRow> = (0..rng.gen_range(1..=40))
            .map(|_| PackedRow {
                tokens: (0..=ctx).map(|_| rng.gen_range(0..vocab)).collect(),
                label,
            })
            .collect();
        let shard = Shard::from_rows(&rows, ctx, vocab)?;
        let path = dir.path().join(format!("{i}.bin"));
        write_shard(&shard, &path)?;
        let bytes = std::fs::read(&path)?;
        let back = read_shard(&path)?;
        if back != shard || back.to_bytes() != bytes || back.rows().collect::<Vec<_>>() != rows {
            return outcome(false, format!("shard {i} did not round-trip"));
        }
        let mut bad = bytes.clone();
        let at = rng.gen_range(0..bad.len());
        bad[at] ^= 1 << rng.gen_range(0..8);
        if Shard::from_bytes(&bad).is_ok() {
            undetected += 1;
        }
        if Shard::from_bytes(&bytes[..bytes.len() - 1]).is_ok() {
            undetected += 1;
        }
    }
    let row: Vec<u32> = (0..2049u32).map(|t| t % 50_432).collect();
    let rows = vec![PackedRow { tokens: row, label: 0 }; 8192];
    let full = Shard::from_rows(&rows, 2048, 50_432)?;
    drop(rows);
    let tokens = full.token_count();
    let bytes = full.to_bytes();
    let exact = Shard::from_bytes(&bytes)? == full && full.header.file_len() == bytes.len();
    outcome(
        undetected == 0 && tokens == 16_785_408 && exact,
        format!("100 shards bit-exact, full shard {tokens} tokens, {undetected} corruptions missed"),
    )
}

fn gradient_check() -> anyhow::Result<Outcome> {
    let worst = common::gradient_check(100, 1);
    outcome(worst < 1e-4, format!("worst relative error {worst:.2e} over 100 parameters"))
}

fn chance_level() -> anyhow::Result<Outcome> {
    let specs = subtle_bias_domains(&SubtleBias::default(), 3)?;
    let (train, test) = build_benchmark(&specs, 500, 1000)?;
    let tok = fit_tokenizer(&train);
    let cfg = TransformerConfig {
        vocab_size: tok.vocab_size() as usize,
        ..TransformerConfig::preset("tiny")?
    };
    let model: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, 17)?;
    let acc = evaluate(&TransformerClassifier::new(&model, &tok)?, &test)?.accuracy;
    outcome((acc - 1.0 / 3.0).abs() <= 0.03, format!("{} on {} documents", pct(acc), test.len()))
}

/// Split into lowercase alphanumeric runs, written independently of the
/// library's featurizer.
fn plain_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Maximum-likelihood domain under the generating unigram weights.
fn unigram_bayes(specs: &[SyntheticDomainSpec]) -> impl Fn(&str) -> u16 + Sync {
    let tables: Vec<HashMap<String, f64>> = specs
        .iter()
        .map(|s| s.words.iter().cloned().zip(s.vocab_weights.iter().map(|w| w.ln())).collect())
        .collect();
    move |text| {
        let words = plain_words(text);
        let mut best = (f64::NEG_INFINITY, 0u16);
        for (d, table) in tables.iter().enumerate() {
            let ll: f64 = words.iter().map(|w| table.get(w).copied().unwrap_or(f64::NEG_INFINITY)).sum();
            if ll > best.0 {
                best = (ll, d as u16);
            }
        }
        best.1
    }
}

fn separable_recovery() -> anyhow::Result<Outcome> {
    let specs = separable_domains(3, 50, LengthDist::Uniform { min: 10, max: 40 }, 21);
    let (train, test) = build_benchmark(&specs, 2000, 500)?;
    let oracle = evaluate(&FnClassifier(unigram_bayes(&specs)), &test)?.accuracy;
    let bow = evaluate(&bow_train(&train, &BowHyper::default())?, &test)?.accuracy;
    let tok = fit_tokenizer(&train);
    let cfg = desk_config(tok.vocab_size() as usize, 64)?;
    let (shards, _) = pack_to_shards(&train, &tok, cfg.context_length, 1 << 20)?;
    let model: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, 1)?;
    let (model, _) = finetune_classifier(model, &shards, &desk_hyper(), true)?;
    let tr = evaluate(&TransformerClassifier::new(&model, &tok)?, &test)?.accuracy;
    outcome(
        oracle == 1.0 && bow >= 0.95 && tr >= 0.95,
        format!("oracle {}, bag of words {}, transformer {}", pct(oracle), pct(bow), pct(tr)),
    )
}

fn subtle_ordering() -> anyhow::Result<Outcome> {
    let specs = subtle_bias_domains(&SubtleBias::default(), 11)?;
    let (train, test) = build_benchmark(&specs, 50_000, 1000)?;
    let bow = evaluate(&bow_train(&train, &BowHyper::default())?, &test)?.accuracy;
    let shallow = evaluate(&shallow_train(&train, &ShallowHyper::default())?, &test)?.accuracy;
    let tok = fit_tokenizer(&train);
    let cfg = desk_config(tok.vocab_size() as usize, 128)?;
    let (shards, _) = pack_to_shards(&train, &tok, cfg.context_length, 1 << 20)?;
    let model: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, 1)?;
    let (model, report) = finetune_classifier(model, &shards, &desk_hyper(), true)?;
    let tr = evaluate(&TransformerClassifier::new(&model, &tok)?, &test)?.accuracy;
    outcome(
        tr >= shallow - 0.02 && shallow >= bow - 0.02,
        format!(
            "transformer {} ({} tokens), shallow {}, bag of words {}",
            pct(tr),
            report.tokens_seen,
            pct(shallow),
            pct(bow)
        ),
    )
}

fn fuzz_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: &[&str] = &[
        "word", "Alpha", "beta.", "end!", "why?", "note:", "-", "*", "•", "–", "1.", "12)", "a)", "B)", "•item",
        "••", "•3.", "x-ray", "3.5", "(a)", "e.g.", "ünï", "\u{2014}", "-5", "42", "ab)", "..", "•-",
    ];
    const GAPS: &[&str] = &[" ", " ", " ", "  ", "\t", "\n", "\r\n", "\n\n", " \n ", "\u{a0}", "\u{2028}", "\r"];
    let mut s = String::new();
    if rng.gen_bool(0.3) {
        s.push_str(GAPS[rng.gen_range(0..GAPS.len())]);
    }
    for _ in 0..rng.gen_range(0..40) {
        s.push_str(PIECES[rng.gen_range(0..PIECES.len())]);
        s.push_str(GAPS[rng.gen_range(0..GAPS.len())]);
    }
    s
}

/// Expected stripped output, computed token by token with a regex for
/// markers.
fn strip_oracle(marker: &Regex, text: &str) -> String {
    let mut kept = Vec::new();
    for line in text.split(['\n', '\r']) {
        let mut sentence_start = true;
        for tok in line.split_whitespace() {
            let tok = if sentence_start { tok.trim_start_matches('•') } else { tok };
            if sentence_start && (tok.is_empty() || marker.is_match(tok)) {
                continue;
            }
            sentence_start = tok.ends_with(['.', '!', '?', ':']);
            kept.push(tok.to_string());
        }
    }
    kept.join(" ")
}

fn format_stripping() -> anyhow::Result<Outcome> {
    let marker = Regex::new(r"^(?:[•\-*–]|[0-9]+[.)]|\p{Alphabetic}\))$")?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut problems = Vec::new();
    for i in 0..10_000 {
        let text = fuzz_text(&mut rng);
        let out = strip_formatting(&text);
        if out.contains(['\n', '\t', '\r']) || out.contains("  ") || out.starts_with(' ') || out.ends_with(' ') {
            problems.push(format!("{i}: layout left in {out:?}"));
        }
        if out != strip_oracle(&marker, &text) {
            problems.push(format!("{i}: {text:?} -> {out:?}"));
        }
        let mut prev: Option<&str> = None;
        for tok in out.split(' ') {
            if prev.map_or(true, |p| p.ends_with(['.', '!', '?', ':'])) && marker.is_match(tok) {
                problems.push(format!("{i}: marker {tok:?} opens a sentence in {out:?}"));
            }
            prev = Some(tok);
        }
        if strip_formatting(&out) != out {
            problems.push(format!("{i}: not idempotent on {out:?}"));
        }
    }
    outcome(
        problems.is_empty(),
        match problems.first() {
            None => "10000 fuzzed texts clean, matches the token oracle, idempotent".into(),
            Some(p) => format!("{} problems, first {p}", problems.len()),
        },
    )
}

fn bow_order_invariance() -> anyhow::Result<Outcome> {
    let specs = subtle_bias_domains(&SubtleBias::default(), 7)?;
    let (train, _) = build_benchmark(&specs, 1000, 0)?;
    let model = bow_train(&train, &BowHyper::default())?;
    let vocab: Vec<&String> = specs[0].words.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut changed = 0;
    for _ in 0..1000 {
        let mut words: Vec<String> = (0..rng.gen_range(1..80))
            .map(|_| match rng.gen_range(0..10) {
                0 => "unseen".to_string(),
                1 => format!("{}.", vocab[rng.gen_range(0..vocab.len())]),
                _ => vocab[rng.gen_range(0..vocab.len())].clone(),
            })
            .collect();
        let text = words.join(" ");
        let before = (model.predict(&text)?, bow_featurize(&text, &model.vocab_index));
        words.shuffle(&mut rng);
        let shuffled = words.join(" ");
        let after = (model.predict(&shuffled)?, bow_featurize(&shuffled, &model.vocab_index));
        if before != after {
            changed += 1;
        }
    }
    outcome(changed == 0, format!("{changed} of 1000 permuted inputs changed prediction or features"))
}

fn mixture_estimation() -> anyhow::Result<Outcome> {
    let specs = separable_domains(4, 40, LengthDist::Uniform { min: 10, max: 40 }, 3);
    let mix = [0.6, 0.3, 0.1];
    let n_docs = 20_000;
    let lm_label = Label::new(0, "mix");
    let mut lm_corpus = Corpus::new("mix");
    lm_corpus.register(&lm_label)?;
    for (spec, p) in specs.iter().zip(mix) {
        for s in generate_synthetic_corpus(spec, &lm_label, (p * n_docs as f64) as usize)?.sequences() {
            lm_corpus.push(s.clone())?;
        }
    }
    let tok = fit_tokenizer(&lm_corpus);
    let cfg = desk_config(tok.vocab_size() as usize, 64)?;
    let (shards, _) = pack_to_shards(&lm_corpus, &tok, cfg.context_length, 1 << 20)?;
    let lm: Transformer = build_transformer(&cfg, HeadMode::LmHead, 1)?;
    let (lm, _) = pretrain_lm(lm, &shards, &desk_hyper())?;
    let dist = first_token_distribution(&lm_corpus, &tok)?;
    let opts = GenerateOptions {
        n: 2048,
        max_len: 32,
        temperature: 1.0,
        seed: 9,
    };
    let (generated, _) = generate_sequences(&lm, &tok, &dist, &opts, &Label::new(0, "generated"))?;

    // the oracle knows which domain owns each word and votes
    let owner: HashMap<String, u16> = specs
        .iter()
        .enumerate()
        .flat_map(|(d, s)| s.words.iter().map(move |w| (w.clone(), d as u16)))
        .collect();
    let oracle = FnClassifier(move |text: &str| {
        let mut votes = [0usize; 4];
        for w in plain_words(text) {
            if let Some(&d) = owner.get(&w) {
                votes[d as usize] += 1;
            }
        }
        (0..4).max_by_key(|&d| (votes[d], std::cmp::Reverse(d))).unwrap() as u16
    });
    let classes: Vec<Label> = (0..4).map(|i| Label::new(i, format!("domain{i}"))).collect();
    let texts: Vec<String> = generated.sequences().iter().map(|s| s.text.clone()).collect();
    let est = estimate_mixture(&oracle, &classes, &texts)?;
    let truth = [0.6, 0.3, 0.1, 0.0];
    let worst = est.proportions.iter().zip(truth).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
    let sums = est.counts.iter().sum::<usize>() == est.n && (est.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    let shown: Vec<String> = est.proportions.iter().map(|&p| pct(p)).collect();
    outcome(
        worst <= 0.02 && sums && est.proportions[3] < 0.01,
        format!("estimates [{}] of 60/30/10/0, worst error {:.2}pp", shown.join(", "), 100.0 * worst),
    )
}

fn linear_probe_contract() -> anyhow::Result<Outcome> {
    let specs = subtle_bias_domains(&SubtleBias::default(), 5)?;
    let (train, test) = build_benchmark(&specs, 5000, 1000)?;
    let tok = fit_tokenizer(&train);
    let cfg = desk_config(tok.vocab_size() as usize, 128)?;
    let hyper = desk_hyper();
    let mut lm_text = Corpus::new("lm");
    lm_text.register(&Label::new(0, "lm"))?;
    for s in train.sequences() {
        lm_text.push(TextSequence { label: 0, ..s.clone() })?;
    }
    let (lm_shards, _) = pack_to_shards(&lm_text, &tok, cfg.context_length, 1 << 20)?;
    let (shards, _) = pack_to_shards(&train, &tok, cfg.context_length, 1 << 20)?;
    let probe_hyper = TrainHyper { lr: 1e-2, ..hyper.clone() };

    let lm: Transformer = build_transformer(&cfg, HeadMode::LmHead, 3)?;
    let (lm, _) = pretrain_lm(lm, &lm_shards, &hyper)?;
    let body = lm.body_checksum();
    let (probe, _) = linear_probe(lm, 3, &shards, &probe_hyper)?;
    let frozen = probe.body_checksum() == body;
    let trained = evaluate(&TransformerClassifier::new(&probe, &tok)?, &test)?.accuracy;

    let random: Transformer = build_transformer(&cfg, HeadMode::LmHead, 4)?;
    let body = random.body_checksum();
    let (probe, _) = linear_probe(random, 3, &shards, &probe_hyper)?;
    let frozen = frozen && probe.body_checksum() == body;
    let rand_acc = evaluate(&TransformerClassifier::new(&probe, &tok)?, &test)?.accuracy;
    outcome(
        frozen && (rand_acc - 1.0 / 3.0).abs() <= 0.03,
        format!(
            "bodies unchanged: {frozen}; random-body probe {}, pretrained-body probe {}",
            pct(rand_acc),
            pct(trained)
        ),
    )
}

fn scaling_trend() -> anyhow::Result<Outcome> {
    let specs = subtle_bias_domains(&SubtleBias::default(), 11)?;
    let (train, test) = build_benchmark(&specs, 50_000, 1000)?;
    let tok = fit_tokenizer(&train);
    let cfg = desk_config(tok.vocab_size() as usize, 128)?;
    let (shards, _) = pack_to_shards(&train, &tok, cfg.context_length, 1 << 20)?;
    let rows: usize = shards.iter().map(|s| s.row_count()).sum();
    let mut accs = Vec::new();
    for budget in [500_000, 1_000_000, 2_000_000, 4_000_000] {
        let hyper = desk_hyper().for_token_budget(budget, rows, cfg.context_length)?;
        let model: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, 1)?;
        let (model, _) = finetune_classifier(model, &shards, &hyper, true)?;
        accs.push(evaluate(&TransformerClassifier::new(&model, &tok)?, &test)?.accuracy);
    }
    let monotone = accs.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let shown: Vec<String> = accs.iter().map(|&a| pct(a)).collect();
    outcome(monotone, format!("0.5M/1M/2M/4M tokens: {}", shown.join(", ")))
}

fn determinism() -> anyhow::Result<Outcome> {
    let specs = separable_domains(3, 30, LengthDist::Uniform { min: 10, max: 40 }, 5);
    let (train, _) = build_benchmark(&specs, 300, 0)?;
    let tok = fit_tokenizer(&train);
    let cfg = desk_config(tok.vocab_size() as usize, 64)?;
    let (shards, _) = pack_to_shards(&train, &tok, cfg.context_length, 1 << 20)?;
    let hyper = TrainHyper {
        seed: 5,
        epochs: 2,
        ..desk_hyper()
    };
    let run = |threads: usize| -> anyhow::Result<(Vec<u8>, String)> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        pool.install(|| {
            let model: Transformer = build_transformer(&cfg, HeadMode::ClassHead { n_classes: 3 }, 2)?;
            let (model, report) = finetune_classifier(model, &shards, &hyper, true)?;
            let meta = serde_json::json!({ "hyper": hyper });
            Ok((checkpoint_bytes(&model, &meta)?, serde_json::to_string(&report)?))
        })
    };
    let a = run(1)?;
    let b = run(1)?;
    let c = run(4)?;
    outcome(
        a == b && a == c,
        format!(
            "checkpoints {} bytes, identical across reruns: {}, across 1 and 4 threads: {}",
            a.0.len(),
            a == b,
            a == c
        ),
    )
}

fn client_contract() -> anyhow::Result<Outcome> {
    let records: Vec<BatchRecord> = ["Knead the dough.", "Stocks fell.", "Stretch daily.", "Gibberish"]
        .iter()
        .enumerate()
        .map(|(i, t)| BatchRecord {
            id: i.to_string(),
            text: t.to_string(),
        })
        .collect();
    let mock = Arc::new(MockBackend::new(|req, call| {
        if call == 1 {
            return Err(CallError::Transient("first call drops".into()));
        }
        let text = &req.messages.last().unwrap().content;
        Ok(if text.starts_with("Rewrite") {
            text.split_once("\n\n").map_or("", |p| p.1).to_lowercase()
        } else if text.contains("dough") {
            "Food & Nutrition".into()
        } else if text.contains("Stocks") {
            "Business & Finance".into()
        } else {
            "I would rather not say".into()
        })
    }));
    let cache = tempfile::tempdir()?;
    let config = ChatClientConfig {
        cache_dir: Some(cache.path().into()),
        backoff_ms: 1,
        api_key_env: None,
        ..ChatClientConfig::default()
    };
    let client = ChatClient::new(config, Box::new(mock.clone()))?;

    let first = categorize_batch(&records, &client, 1)?;
    let rewritten = rewrite_batch(&records, RewritePrompt::P1, &client, 1)?;
    let calls = mock.ledger().calls;
    let again = categorize_batch(&records, &client, 1)?;
    rewrite_batch(&records, RewritePrompt::P1, &client, 1)?;
    let no_new_calls = mock.ledger().calls == calls;

    let mapped = first[0].text == "Food & Nutrition"
        && first[1].status == "ok"
        && [2, 3].iter().all(|&i| first[i].text == "Other" && first[i].status == "flagged")
        && again == first
        && rewritten[1].text == "stocks fell.";
    let costs = client.costs();
    let ledger = mock.ledger();
    let matched = costs.requests == ledger.calls
        && costs.prompt_tokens == ledger.prompt_tokens
        && costs.completion_tokens == ledger.completion_tokens
        && costs.failures == 1
        && costs.cache_hits > 0;
    outcome(
        no_new_calls && mapped && matched,
        format!(
            "cached pass made no calls: {no_new_calls}, malformed answers flagged as Other: {mapped}, counters {}/{}/{} match ledger {}/{}/{}: {matched}",
            costs.requests, costs.prompt_tokens, costs.completion_tokens, ledger.calls, ledger.prompt_tokens, ledger.completion_tokens
        ),
    )
}
