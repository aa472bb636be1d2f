//! Remote clients against recorded wire fixtures and a local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use upcs::chat::{ChatClient, PromptSet};
use upcs::embedding::{EmbeddingProvider, RemoteEmbedder};
use upcs::error::ProviderError;
use upcs::generator::{Generator, RemoteGenerator};
use upcs::persona::{DimensionKey, Stage};
use upcs::transport::{HttpTransport, ReplayTransport, RetryPolicy};

fn fixture(name: &str) -> Value {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

type RequestLog = Arc<Mutex<Vec<(String, Value)>>>;

/// Serves one scripted (status, body) pair per connection and records the
/// request headers and bodies it received.
fn serve(script: Vec<(u16, String)>) -> (String, RequestLog, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut headers = String::new();
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
                headers.push_str(&line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock()
                .unwrap()
                .push((headers, serde_json::from_slice(&buf).unwrap()));
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn http() -> Arc<HttpTransport> {
    Arc::new(HttpTransport::new(Duration::from_secs(5)).unwrap())
}

#[test]
fn chat_retries_server_errors_then_succeeds() {
    let ok = json!({"choices": [{"message": {"content": "hello"}}]}).to_string();
    let (url, seen, handle) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, ok)]);
    let client = ChatClient::new(http(), url, "m".into(), 0.2, Some("secret".into()), 2)
        .with_retry(RetryPolicy::no_delay(3));
    assert_eq!(client.complete("hi").unwrap(), "hello");
    handle.join().unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[0]
        .0
        .to_ascii_lowercase()
        .contains("authorization: bearer secret"));
    assert_eq!(
        seen[2].1,
        json!({"model": "m", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.2})
    );
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen, handle) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
    let client =
        ChatClient::new(http(), url, "m".into(), 0.0, None, 1).with_retry(RetryPolicy::no_delay(3));
    let err = client.complete("hi").unwrap_err();
    handle.join().unwrap();
    assert!(matches!(err, ProviderError::Fatal(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_exhausted_surface_retriable_error() {
    let (url, _, handle) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
    let client =
        ChatClient::new(http(), url, "m".into(), 0.0, None, 1).with_retry(RetryPolicy::no_delay(2));
    assert!(client.complete("hi").unwrap_err().is_retriable());
    handle.join().unwrap();
}

#[test]
fn remote_embedder_over_http() {
    let body = json!({"data": [{"embedding": [0.6, 0.8]}, {"embedding": [1.0, 0.0]}]}).to_string();
    let (url, seen, handle) = serve(vec![(200, body)]);
    let e = RemoteEmbedder::new(http(), url, "emb".into(), 2, None, 1)
        .with_retry(RetryPolicy::no_delay(1));
    let out = e.embed_batch(&["a".into(), "b".into()]).unwrap();
    handle.join().unwrap();
    assert_eq!(out[0].values(), [0.6, 0.8]);
    assert_eq!(
        seen.lock().unwrap()[0].1,
        json!({"model": "emb", "input": ["a", "b"]})
    );
}

#[test]
fn remote_generator_replays_recorded_fixtures() {
    let transport = Arc::new(ReplayTransport::new([
        Ok(fixture("chat_description.json")),
        Ok(fixture("chat_persona_5dims.json")),
    ]));
    let client = ChatClient::new(transport.clone(), "u".into(), "gen".into(), 0.7, None, 1)
        .with_retry(RetryPolicy::no_delay(1));
    let g = RemoteGenerator::new(Arc::new(client), PromptSet::bundled(), 0);
    let desc = g.generate_description("a baker").unwrap();
    assert_eq!(desc.motivations, "wants to reopen the family bakery");
    assert_eq!(
        desc.summary,
        "A patient baker rebuilding a family business."
    );
    let p = g.build_initial_persona("p0001", &desc).unwrap();
    let present: Vec<DimensionKey> = p.dimensions().keys().copied().collect();
    assert_eq!(
        present,
        [
            DimensionKey::Personality,
            DimensionKey::Experience,
            DimensionKey::Hobbies,
            DimensionKey::Habits,
            DimensionKey::ExternalFeatures
        ]
    );
    assert_eq!(p.provenance()[0].stage, Stage::Initial);
    let requests = transport.requests();
    assert!(requests[0].1["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("a baker"));
    assert!(requests[1].1["messages"][0]["content"]
        .as_str()
        .unwrap()
        .contains("bakes bread by feel"));
}

#[test]
fn unparseable_completion_carries_raw_text() {
    let junk = json!({"choices": [{"message": {"content": "no json here"}}]});
    let transport = Arc::new(ReplayTransport::new([Ok(junk.clone()), Ok(junk)]));
    let client = ChatClient::new(transport, "u".into(), "gen".into(), 0.7, None, 1);
    let g = RemoteGenerator::new(Arc::new(client), PromptSet::bundled(), 1);
    match g.generate_description("a baker") {
        Err(ProviderError::Generation { raw, .. }) => assert_eq!(raw, "no json here"),
        other => panic!("{other:?}"),
    }
}
