//! Remote clients against a local one-shot HTTP server.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use toolrl_core::http::{HttpError, JsonClient};
use toolrl_core::reward::{search_similarity, EmbeddingProvider, RemoteEmbedder};
use toolrl_core::rollout::{ChatConfig, ChatModel, Message, ModelProvider, Role, TurnContext};
use toolrl_core::search::{SearchBackend, SearchQuery, SerperBackend, SerperConfig};

struct Seen {
    path: String,
    headers: BTreeMap<String, String>,
    body: Value,
}

/// Serves the canned `(status, body)` responses in order, one per
/// connection, and reports each request it saw.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut headers = BTreeMap::new();
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                headers.insert(k.trim().to_lowercase(), v.trim().to_string());
            }
            let len: usize = headers.get("content-length").map(|v| v.parse().unwrap()).unwrap_or(0);
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Seen {
                path,
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, rx) = serve(vec![(503, "{}".into()), (500, "{}".into()), (200, r#"{"ok":true}"#.into())]);
    let client = JsonClient::new(Duration::from_secs(5), 2).unwrap().with_backoff(Duration::from_millis(1));
    let v = client.post(&format!("{url}/x"), &[], &json!({"a": 1})).unwrap();
    assert_eq!(v["ok"], true);
    assert_eq!(rx.iter().take(3).count(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _rx) = serve(vec![(404, r#"{"error":"nope"}"#.into()), (200, "{}".into())]);
    let client = JsonClient::new(Duration::from_secs(5), 3).unwrap().with_backoff(Duration::from_millis(1));
    match client.post(&url, &[], &json!({})) {
        Err(HttpError::Status { status, .. }) => assert_eq!(status, 404),
        other => panic!("{other:?}"),
    }
}

#[test]
fn serper_request_and_parse() {
    std::env::set_var("TOOLRL_TEST_SERPER_KEY", "s3cret");
    let body = json!({"organic": [
        {"title": "Eiffel Tower", "snippet": "Built in 1889.", "link": "https://e.org/1"},
        {"title": "Paris", "snippet": "Capital of France.", "link": "https://e.org/2"}
    ]});
    let (url, rx) = serve(vec![(200, body.to_string())]);
    let backend = SerperBackend::new(SerperConfig {
        endpoint: format!("{url}/search"),
        api_key_env: "TOOLRL_TEST_SERPER_KEY".into(),
        ..SerperConfig::default()
    })
    .unwrap();
    let hits = backend.search(&SearchQuery::new("eiffel tower", 5).unwrap()).unwrap();
    assert_eq!(hits.len(), 2);
    assert_eq!(
        (hits[0].rank, hits[0].title.as_str(), hits[0].url.as_str()),
        (1, "Eiffel Tower", "https://e.org/1")
    );
    let seen = rx.recv().unwrap();
    assert_eq!(seen.path, "/search");
    assert_eq!(seen.headers["x-api-key"], "s3cret");
    assert_eq!(seen.body, json!({"q": "eiffel tower", "num": 5}));
}

#[test]
fn serper_missing_key() {
    let backend = SerperBackend::new(SerperConfig {
        endpoint: "http://127.0.0.1:9/".into(),
        api_key_env: "TOOLRL_TEST_UNSET_KEY_VAR".into(),
        ..SerperConfig::default()
    })
    .unwrap();
    assert!(backend.search(&SearchQuery::new("q", 3).unwrap()).is_err());
}

#[test]
fn chat_completion_round_trip() {
    std::env::set_var("TOOLRL_TEST_CHAT_KEY", "k-123");
    let (url, rx) = serve(vec![(
        200,
        json!({"choices": [{"message": {"role": "assistant", "content": "<think>t</think><answer>Paris</answer>"}}]}).to_string(),
    )]);
    let model = ChatModel::new(ChatConfig {
        endpoint: format!("{url}/v1/chat/completions"),
        api_key_env: "TOOLRL_TEST_CHAT_KEY".into(),
        model: "test-model".into(),
        ..ChatConfig::default()
    })
    .unwrap();
    let messages = vec![
        Message {
            role: Role::System,
            text: "sys".into(),
            images: vec![],
        },
        Message {
            role: Role::User,
            text: "q".into(),
            images: vec![],
        },
    ];
    let images = BTreeMap::new();
    let out = model
        .complete(&TurnContext {
            task_id: "t",
            turn_index: 0,
            messages: &messages,
            images: &images,
        })
        .unwrap();
    assert_eq!(out, "<think>t</think><answer>Paris</answer>");
    let seen = rx.recv().unwrap();
    assert_eq!(seen.headers["authorization"], "Bearer k-123");
    assert_eq!(seen.body["model"], "test-model");
    assert_eq!(seen.body["messages"][0], json!({"role": "system", "content": "sys"}));
}

#[test]
fn chat_completion_bad_shape() {
    std::env::set_var("TOOLRL_TEST_CHAT_KEY2", "k");
    let (url, _rx) = serve(vec![(200, r#"{"choices":[]}"#.into())]);
    let model = ChatModel::new(ChatConfig {
        endpoint: url,
        api_key_env: "TOOLRL_TEST_CHAT_KEY2".into(),
        ..ChatConfig::default()
    })
    .unwrap();
    let images = BTreeMap::new();
    assert!(model
        .complete(&TurnContext {
            task_id: "t",
            turn_index: 0,
            messages: &[],
            images: &images,
        })
        .is_err());
}

#[test]
fn remote_embeddings_and_fallback() {
    std::env::set_var("TOOLRL_TEST_EMBED_KEY", "e");
    let (url, rx) = serve(vec![(200, json!({"vectors": [[1.0, 0.0], [0.6, 0.8]]}).to_string())]);
    let emb = RemoteEmbedder::new(&url, "TOOLRL_TEST_EMBED_KEY", Duration::from_secs(5), 0).unwrap();
    let v = emb.embed(&["a".into(), "b".into()]).unwrap();
    assert!((v[0].cosine(&v[1]) - 0.6).abs() < 1e-12);
    assert_eq!(rx.recv().unwrap().body, json!({"texts": ["a", "b"]}));

    // unreachable endpoint: similarity falls back to term-frequency vectors
    let dead = RemoteEmbedder::new("http://127.0.0.1:9/embed", "TOOLRL_TEST_EMBED_KEY", Duration::from_millis(300), 0).unwrap();
    let out = search_similarity(&["capital France".into()], &["capital France".into()], &dead);
    assert!(out.fallback_used);
    assert_eq!(out.value, 1.0);
}
