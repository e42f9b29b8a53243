//! HTTP backends against an in-process server speaking the completions,
//! chat and embedding wire formats.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use kdiag::cache::RecordCache;
use kdiag::corpus::Query;
use kdiag::http::JsonClient;
use kdiag::retrieval::{EmbedItem, Embedder, HttpEmbedder};
use kdiag::retry::RetryPolicy;
use kdiag::scorer::{BackendError, HttpBackend, ScoreError, ScoreRequest, Scorer};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = Arc<dyn Fn(&str, &Value, usize) -> (u16, Value) + Send + Sync>;

struct Server {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Option<String>, Value)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut length = 0;
    let mut auth = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':')?;
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().ok()?,
            "authorization" => auth = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).ok()?;
    Some((path, auth, serde_json::from_slice(&body).unwrap_or(Value::Null)))
}

fn serve(handler: Handler) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for mut stream in listener.incoming().flatten() {
            let Some((path, auth, body)) = read_request(&mut stream) else { continue };
            let n = {
                let mut l = log.lock().unwrap();
                l.push(Seen {
                    path: path.clone(),
                    auth,
                    body: body.clone(),
                });
                l.len()
            };
            let (status, payload) = handler(&path, &body, n);
            let text = payload.to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                text.len()
            );
        }
    });
    Server { url, seen }
}

/// One token per whitespace-separated word, logprob = -0.1 per character.
fn echo_logprobs(prompt: &str) -> Value {
    let mut offsets = Vec::new();
    let mut lps = Vec::new();
    let mut start = None;
    for (i, c) in prompt.chars().chain(std::iter::once(' ')).enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                offsets.push(s);
                lps.push(-0.1 * (i - s) as f64);
                start = None;
            }
            _ => {}
        }
    }
    json!({"choices": [{"text": "", "logprobs": {"token_logprobs": lps, "text_offset": offsets}}]})
}

/// Expected NLL for the tail of `full` after `prefix_chars` characters.
fn oracle_nll(full: &str, prefix_chars: usize) -> (f64, u32) {
    let v = echo_logprobs(full);
    let lp = v["choices"][0]["logprobs"]["token_logprobs"].as_array().unwrap().clone();
    let off = v["choices"][0]["logprobs"]["text_offset"].as_array().unwrap().clone();
    let mut nll = 0.0;
    let mut n = 0;
    for (l, o) in lp.iter().zip(off) {
        if o.as_u64().unwrap() as usize >= prefix_chars {
            nll -= l.as_f64().unwrap();
            n += 1;
        }
    }
    (nll, n)
}

fn query() -> Query {
    Query::new(
        "Why did the ice cream melt?",
        vec!["it was left in the sun".into(), "it was frozen".into(), "wind".into()],
        Some(0),
        vec![],
    )
    .unwrap()
}

fn client(token_env: Option<&str>) -> JsonClient {
    JsonClient::from_env(Duration::from_secs(5), token_env)
}

#[test]
fn scores_come_from_echoed_logprobs() {
    std::env::set_var("KDIAG_TEST_TOKEN", "sekrit");
    let server = serve(Arc::new(|path: &str, body: &Value, _| {
        assert_eq!(path, "/v1/completions");
        (200, echo_logprobs(body["prompt"].as_str().unwrap()))
    }));
    let backend = HttpBackend::new(&server.url, "test-model", client(Some("KDIAG_TEST_TOKEN")));
    let scorer = Scorer::new(Arc::new(backend));
    let q = query();
    let req = ScoreRequest::prior(&q, "plain");
    let scores = scorer.score_options(&req).unwrap();
    let prompt = scorer.render(&req).unwrap();

    let seen = server.seen.lock().unwrap().clone();
    assert_eq!(seen.len(), 3);
    for (i, s) in seen.iter().enumerate() {
        assert_eq!(s.auth.as_deref(), Some("Bearer sekrit"));
        assert_eq!(s.body["echo"], true);
        assert_eq!(s.body["model"], "test-model");
        let full = s.body["prompt"].as_str().unwrap();
        assert!(full.starts_with(&prompt));
        let (nll, tokens) = oracle_nll(full, prompt.chars().count());
        let idx = q.options.iter().position(|o| full.ends_with(o.as_str())).unwrap();
        assert!((scores.nll[idx] - nll).abs() < 1e-12, "option {i}");
        assert_eq!(scores.token_counts[idx], tokens);
    }
}

#[test]
fn logprob_refusal_is_reported_not_retried() {
    let server = serve(Arc::new(|_: &str, _: &Value, _| {
        (400, json!({"error": {"message": "logprobs are not supported"}}))
    }));
    let backend = HttpBackend::new(&server.url, "m", client(None));
    let scorer = Scorer::new(Arc::new(backend)).with_retry(RetryPolicy {
        retries: 3,
        base_delay_ms: 1,
    });
    let err = scorer.score_options(&ScoreRequest::prior(&query(), "plain")).unwrap_err();
    assert_eq!(err, ScoreError::Backend(BackendError::NoLogprobs));
    assert_eq!(server.seen.lock().unwrap().len(), 1);
}

#[test]
fn transient_failures_are_retried() {
    let server = serve(Arc::new(|path: &str, _: &Value, n| {
        if n == 1 {
            return (503, json!({"error": "busy"}));
        }
        assert_eq!(path, "/v1/chat/completions");
        (200, json!({"choices": [{"message": {"content": "The answer is (B)."}, "finish_reason": "stop"}]}))
    }));
    let backend = HttpBackend::new(&server.url, "m", client(None));
    let scorer = Scorer::new(Arc::new(backend)).with_retry(RetryPolicy {
        retries: 2,
        base_delay_ms: 1,
    });
    let out = scorer.generate(&ScoreRequest::prior(&query(), "plain")).unwrap();
    assert!(out.text.contains("(B)"));
    let seen = server.seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].body["messages"][0]["role"], "user");
}

#[test]
fn embeddings_round_trip_and_cache() {
    let server = serve(Arc::new(|_: &str, body: &Value, _| {
        let vectors: Vec<Vec<f64>> = body["texts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| vec![t.as_str().unwrap().len() as f64, 1.0])
            .collect();
        (200, json!({ "vectors": vectors }))
    }));
    let provider = HttpEmbedder::new(format!("{}/embed", server.url), "e", client(None));
    let embedder = Embedder::new(Arc::new(provider), RecordCache::in_memory());
    let items = vec![
        EmbedItem {
            owner_id: "a".into(),
            text: "abc".into(),
        },
        EmbedItem {
            owner_id: "b".into(),
            text: "abcdef".into(),
        },
    ];
    let first = embedder.embed(&items).unwrap();
    let v = first[0].as_ref().unwrap();
    let norm = (9.0f64 + 1.0).sqrt();
    assert!((v.values[0] - 3.0 / norm).abs() < 1e-12);
    let calls = server.seen.lock().unwrap().len();
    assert_eq!(server.seen.lock().unwrap()[0].path, "/embed");
    let again = embedder.embed(&items).unwrap();
    assert_eq!(server.seen.lock().unwrap().len(), calls);
    assert_eq!(first, again);
}

#[test]
fn unreachable_server_is_a_backend_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(format!("http://127.0.0.1:{port}"), "m", client(None));
    let scorer = Scorer::new(Arc::new(backend)).with_retry(RetryPolicy {
        retries: 1,
        base_delay_ms: 1,
    });
    let err = scorer.score_options(&ScoreRequest::prior(&query(), "plain")).unwrap_err();
    assert!(err.is_backend(), "{err}");
}
