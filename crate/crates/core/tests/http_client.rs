//! The HTTP backend against a throwaway server on a local socket.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use dsclf::transforms::{categorize, rewrite, ChatClient, ChatClientConfig, RewritePrompt};

/// Serve `replies` in order, one connection each, recording request bodies.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(String::from_utf8(buf).unwrap());
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
        bodies
    });
    (url, hits, handle)
}

fn completion(text: &str, p: u64, c: u64) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": p, "completion_tokens": c}
    })
    .to_string()
}

fn config(url: String, cache: Option<&std::path::Path>) -> ChatClientConfig {
    ChatClientConfig {
        endpoint: url,
        backoff_ms: 1,
        max_retries: 2,
        api_key_env: None,
        cache_dir: cache.map(Into::into),
        ..ChatClientConfig::default()
    }
}

#[test]
fn posts_chat_requests_and_caches_results() {
    let (url, hits, server) = serve(vec![
        (503, "{}".into()),
        (200, completion("Rewritten text.", 40, 3)),
    ]);
    let cache = tempfile::tempdir().unwrap();
    let client = ChatClient::http(config(url, Some(cache.path()))).unwrap();
    let out = rewrite("Some text.", RewritePrompt::P2, &client).unwrap();
    assert_eq!(out, "Rewritten text.");
    // second time from disk, the server is gone by then
    let again = rewrite("Some text.", RewritePrompt::P2, &client).unwrap();
    assert_eq!(again, out);
    let bodies = server.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    let req: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(req["temperature"], 0.0);
    assert_eq!(req["messages"][0]["role"], "user");
    assert!(req["messages"][0]["content"].as_str().unwrap().starts_with(RewritePrompt::P2.template()));
    let c = client.costs();
    assert_eq!((c.requests, c.failures, c.cache_hits), (2, 1, 1));
    assert_eq!((c.prompt_tokens, c.completion_tokens), (40, 3));
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits, server) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
    let client = ChatClient::http(config(url, None)).unwrap();
    let err = rewrite("x", RewritePrompt::P1, &client).unwrap_err();
    assert_eq!(err.kind(), "endpoint");
    server.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn unparseable_category_is_retried_then_flagged() {
    let (url, _, server) = serve(vec![
        (200, completion("Hmm, hard to say", 10, 4)),
        (200, completion("Probably cooking?", 10, 2)),
    ]);
    let client = ChatClient::http(config(url, None)).unwrap();
    let o = categorize("Boil the pasta.", &client).unwrap();
    assert!(o.flagged);
    assert_eq!(o.category.name(), "Other");
    server.join().unwrap();
    assert_eq!(client.costs().completion_tokens, 6);
}
