use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use mia_core::embeddings::{Embedder, EmbedderConfig};
use mia_core::llm::{LlmClient, LlmConfig};
use mia_core::prompts::RenderedPrompt;
use mia_core::Error;
use serde_json::{json, Value};

struct Captured {
    headers: Vec<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, recording requests.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn chat_reply(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn llm_config(url: &str) -> LlmConfig {
    LlmConfig {
        backoff_ms: 1,
        ..LlmConfig::http(url, "test-model")
    }
}

fn prompt() -> RenderedPrompt {
    RenderedPrompt {
        template_id: "t".into(),
        system: "be brief".into(),
        user: "hello".into(),
    }
}

#[test]
fn chat_request_shape_and_reply() {
    let (url, seen) = serve(vec![(200, chat_reply("hi there"))]);
    let client = LlmClient::from_config(&llm_config(&url)).unwrap();
    assert_eq!(client.complete(&prompt()).unwrap(), "hi there");
    let seen = seen.lock().unwrap();
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0], json!({"role": "system", "content": "be brief"}));
    assert_eq!(body["messages"][1], json!({"role": "user", "content": "hello"}));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, chat_reply("finally")),
    ]);
    let client = LlmClient::from_config(&llm_config(&url)).unwrap();
    assert_eq!(client.complete(&prompt()).unwrap(), "finally");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "{\"error\":\"bad\"}".into()), (200, chat_reply("unused"))]);
    let client = LlmClient::from_config(&llm_config(&url)).unwrap();
    let err = client.complete(&prompt()).unwrap_err();
    assert!(matches!(err, Error::ProviderFailure { retryable: false, .. }), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn bearer_token_from_environment() {
    std::env::set_var("MIA_TEST_TOKEN", "s3cret");
    let (url, seen) = serve(vec![(200, chat_reply("ok"))]);
    let mut cfg = llm_config(&url);
    cfg.token_env = Some("MIA_TEST_TOKEN".into());
    LlmClient::from_config(&cfg).unwrap().complete(&prompt()).unwrap();
    let seen = seen.lock().unwrap();
    assert!(seen[0].headers.iter().any(|h| h == "Authorization: Bearer s3cret"));
}

#[test]
fn missing_token_variable_is_a_config_error() {
    let mut cfg = llm_config("http://127.0.0.1:9/v1");
    cfg.token_env = Some("MIA_TEST_TOKEN_UNSET".into());
    assert!(matches!(LlmClient::from_config(&cfg), Err(Error::Config(_))));
}

#[test]
fn embedder_batches_and_normalizes() {
    let (url, seen) = serve(vec![
        (200, json!({"vectors": [[3.0, 4.0], [0.0, 2.0]]}).to_string()),
        (200, json!({"vectors": [[1.0, 0.0]]}).to_string()),
    ]);
    let emb = Embedder::from_config(&EmbedderConfig {
        kind: "http".into(),
        endpoint: Some(url),
        dim: 2,
        batch_size: 2,
        ..EmbedderConfig::default()
    })
    .unwrap();
    let out = emb.embed_batch(&["a", "b", "c"]).unwrap();
    assert_eq!(out[0].as_slice(), &[0.6, 0.8]);
    assert_eq!(out[1].as_slice(), &[0.0, 1.0]);
    assert_eq!(out[2].as_slice(), &[1.0, 0.0]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].body, json!({"texts": ["a", "b"]}));
    assert_eq!(seen[1].body, json!({"texts": ["c"]}));
}

#[test]
fn embedder_rejects_wrong_dimension() {
    let (url, _) = serve(vec![(200, json!({"vectors": [[1.0, 0.0, 0.0]]}).to_string())]);
    let emb = Embedder::from_config(&EmbedderConfig {
        kind: "http".into(),
        endpoint: Some(url),
        dim: 2,
        ..EmbedderConfig::default()
    })
    .unwrap();
    assert!(matches!(emb.embed("x"), Err(Error::DimMismatch { left: 2, right: 3 })));
}
