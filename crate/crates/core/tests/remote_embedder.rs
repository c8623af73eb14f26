//! Wire-protocol tests for the remote embedding provider, served by a
//! minimal in-process HTTP/1.1 responder.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use tslab::embedder::{EmbedError, EmbeddingProvider, ProviderConfig, ProviderKind};
use tslab::serializer::PromptText;

/// One-shot HTTP server: answers `hits` requests with the supplied handler,
/// then stops. Returns (endpoint, captured request bodies).
fn serve(
    hits: u32,
    status_plan: Vec<u16>,
    dim: usize,
) -> (String, Arc<AtomicU32>, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind test listener");
    let addr = listener.local_addr().unwrap();
    let calls = Arc::new(AtomicU32::new(0));
    let calls_srv = calls.clone();
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for i in 0..hits {
            let (mut stream, _) = listener.accept().expect("accept");
            let mut buf = Vec::new();
            let mut tmp = [0u8; 4096];
            // Read headers + body (requests here are small; Content-Length
            // delimits the body).
            let body = loop {
                let n = stream.read(&mut tmp).expect("read");
                buf.extend_from_slice(&tmp[..n]);
                if let Some(split) = find_header_end(&buf) {
                    let headers = String::from_utf8_lossy(&buf[..split]).to_string();
                    let len = headers
                        .lines()
                        .find_map(|l| {
                            l.to_ascii_lowercase()
                                .strip_prefix("content-length:")
                                .map(|v| v.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    if buf.len() >= split + 4 + len {
                        break String::from_utf8_lossy(&buf[split + 4..split + 4 + len])
                            .to_string();
                    }
                }
            };
            bodies.push(body);
            calls_srv.fetch_add(1, Ordering::SeqCst);
            let status = status_plan.get(i as usize).copied().unwrap_or(200);
            let payload = if status == 200 {
                let values: Vec<String> = (0..dim).map(|j| format!("{}.5", j % 3)).collect();
                format!("{{\"data\":[{{\"embedding\":[{}]}}]}}", values.join(","))
            } else {
                "{\"error\":\"boom\"}".to_string()
            };
            let reason = if status == 200 { "OK" } else { "Internal Server Error" };
            let resp = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            stream.write_all(resp.as_bytes()).expect("write response");
        }
        bodies
    });
    (format!("http://{addr}"), calls, handle)
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn remote_config(endpoint: &str, dim: usize) -> ProviderConfig {
    ProviderConfig {
        kind: ProviderKind::Remote,
        endpoint: Some(endpoint.to_string()),
        model_name: "e5-mistral-7b-instruct".into(),
        cache_dir: None,
        dim,
        timeout_ms: 5_000,
        max_retries: 2,
    }
}

fn prompt(text: &str) -> PromptText {
    PromptText {
        text: format!("Instruct: classify\nQuery: {text}"),
        synthetic_proxy: None,
    }
}

#[test]
fn request_and_response_follow_the_wire_shape() {
    let (endpoint, _, handle) = serve(1, vec![200], 8);
    let provider = EmbeddingProvider::new(remote_config(&endpoint, 8)).unwrap();
    let v = provider.embed(&prompt("the age is 30")).unwrap();
    assert_eq!(v.dim(), 8);
    assert_eq!(v.values[1], 1.5);
    let bodies = handle.join().unwrap();
    let req: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(req["model"], "e5-mistral-7b-instruct");
    assert_eq!(
        req["input"][0],
        "Instruct: classify\nQuery: the age is 30"
    );
}

#[test]
fn retries_recover_from_transient_errors() {
    let (endpoint, calls, handle) = serve(2, vec![500, 200], 4);
    let provider = EmbeddingProvider::new(remote_config(&endpoint, 4)).unwrap();
    let v = provider.embed(&prompt("x")).unwrap();
    assert_eq!(v.dim(), 4);
    assert_eq!(calls.load(Ordering::SeqCst), 2, "expected one retry");
    handle.join().unwrap();
}

#[test]
fn exhausted_retries_become_a_transport_error() {
    let (endpoint, calls, handle) = serve(3, vec![500, 500, 500], 4);
    let provider = EmbeddingProvider::new(remote_config(&endpoint, 4)).unwrap();
    let err = provider.embed(&prompt("x")).unwrap_err();
    match err {
        EmbedError::Transport { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(calls.load(Ordering::SeqCst), 3);
    handle.join().unwrap();
}

#[test]
fn dimension_mismatch_is_a_provider_error() {
    let (endpoint, _, handle) = serve(1, vec![200], 6);
    // Provider declares 4096 but the service returns 6.
    let provider = EmbeddingProvider::new(remote_config(&endpoint, 4096)).unwrap();
    let err = provider.embed(&prompt("x")).unwrap_err();
    assert!(matches!(err, EmbedError::Dim { want: 4096, got: 6 }), "{err:?}");
    handle.join().unwrap();
}

#[test]
fn remote_results_are_cached_once() {
    let dir = tempfile::tempdir().unwrap();
    let (endpoint, calls, handle) = serve(1, vec![200], 4);
    let mut cfg = remote_config(&endpoint, 4);
    cfg.cache_dir = Some(dir.path().to_path_buf());
    let provider = EmbeddingProvider::new(cfg.clone()).unwrap();
    let a = provider.embed(&prompt("cache me")).unwrap();
    let b = provider.embed(&prompt("cache me")).unwrap();
    assert_eq!(a, b);
    assert_eq!(calls.load(Ordering::SeqCst), 1, "second call must hit the cache");
    // A fresh provider (server already gone) still answers from disk.
    let provider2 = EmbeddingProvider::new(cfg).unwrap();
    let c = provider2.embed(&prompt("cache me")).unwrap();
    assert_eq!(a, c);
    assert_eq!(provider2.provider_calls(), 0);
    handle.join().unwrap();
}
