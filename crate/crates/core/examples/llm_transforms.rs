//! Strip formatting, rewrite and categorize a small batch. Uses a local mock
//! endpoint unless `DSCLF_ENDPOINT` points at a real chat-completions URL.
//!
//!     cargo run --release --example llm_transforms

use std::sync::Arc;

use dsclf::transforms::{
    aggregate_categories, categorize_batch, rewrite_batch, strip_formatting, BatchRecord, Category, ChatClient,
    ChatClientConfig, MockBackend, RewritePrompt,
};

fn main() -> anyhow::Result<()> {
    let docs = [
        "Shopping list:\n- eggs\n- flour\n\n2. bake at 180C",
        "The committee voted 7 to 2.\nMarkets reacted calmly.",
        "Warm up for 10 minutes,\n* then stretch\n* then run",
    ];
    for d in docs {
        println!("{:?}\n  -> {:?}", d, strip_formatting(d));
    }
    let records: Vec<BatchRecord> = docs
        .iter()
        .enumerate()
        .map(|(i, t)| BatchRecord {
            id: i.to_string(),
            text: t.to_string(),
        })
        .collect();

    let cache = tempfile::tempdir()?;
    let config = ChatClientConfig {
        cache_dir: Some(cache.path().into()),
        ..ChatClientConfig::default()
    };
    let mock = Arc::new(MockBackend::new(|req, _| {
        let text = &req.messages.last().unwrap().content;
        Ok(if text.starts_with("Rewrite") {
            text.split_once("\n\n").map_or("", |p| p.1).to_uppercase()
        } else if text.contains("Markets") {
            "News & Media".into()
        } else if text.contains("Warm up") {
            "Health, Wellness & Fitness".into()
        } else {
            "not sure".into()
        })
    }));
    let client = match std::env::var("DSCLF_ENDPOINT") {
        Ok(url) => ChatClient::http(ChatClientConfig { endpoint: url, ..config })?,
        Err(_) => ChatClient::new(config, Box::new(mock.clone()))?,
    };

    for r in rewrite_batch(&records, RewritePrompt::P1, &client, 2)? {
        println!("rewrite {} [{}]: {:?}", r.id, r.status, r.text);
    }
    let cats = categorize_batch(&records, &client, 2)?;
    for r in &cats {
        println!("category {} [{}]: {}", r.id, r.status, r.text);
    }
    // second pass is served from the disk cache
    categorize_batch(&records, &client, 2)?;
    let labels: Vec<Category> = cats.iter().map(|r| Category::parse(&r.text).unwrap_or(Category::Other)).collect();
    print!("{}", aggregate_categories(&labels)?.to_table());
    println!("costs {:?}", client.costs());
    println!("mock ledger {:?}", mock.ledger());
    Ok(())
}
