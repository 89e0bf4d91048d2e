use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use refinelm::backend::{probe, prompt_id, BackendError, HttpBackend, HttpConfig, ProbeRequest};

struct Reply {
    status: u16,
    body: String,
    delay: Duration,
}

fn reply(status: u16, body: impl Into<String>) -> Reply {
    Reply {
        status,
        body: body.into(),
        delay: Duration::ZERO,
    }
}

/// Serves `POST /probe` on a loopback port; `handler` gets the 0-based
/// request number and the decoded request.
fn serve(handler: impl Fn(usize, ProbeRequest) -> Reply + Send + Sync + 'static) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let seen = count.clone();
    let handler = Arc::new(handler);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let handler = handler.clone();
            let n = seen.fetch_add(1, Ordering::SeqCst);
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut line = String::new();
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                loop {
                    line.clear();
                    reader.read_line(&mut line).unwrap();
                    if line.trim().is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                assert!(request_line.starts_with("POST /probe "), "{request_line}");
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let req: ProbeRequest = serde_json::from_slice(&body).unwrap();
                let r = handler(n, req);
                thread::sleep(r.delay);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    r.status,
                    r.body.len(),
                    r.body
                );
            });
        }
    });
    (url, count)
}

fn good_body(req: &ProbeRequest) -> String {
    let topk: Vec<(String, f64)> = (0..req.k)
        .map(|i| {
            let tok = if i == 1 { "Ann".to_string() } else { format!("w{i}") };
            (tok, 0.4 / (i as f64 + 1.0))
        })
        .collect();
    serde_json::json!({
        "prompt_id": prompt_id(&req.prompt),
        "prompt": req.prompt,
        "topk": topk,
        "subjects": {"Ann": 1, "Bob": -1},
    })
    .to_string()
}

fn backend(url: &str, timeout_ms: u64) -> HttpBackend {
    HttpBackend::open(
        url,
        HttpConfig {
            timeout: Duration::from_millis(timeout_ms),
            retries: 2,
            max_in_flight: 4,
        },
    )
    .unwrap()
}

const PROMPT: &str = "Ann met Bob. [MASK] was kind.";

#[test]
fn successful_probe_decodes_indices() {
    let (url, _) = serve(|_, req| {
        assert_eq!(req.subjects, ["Ann", "Bob"]);
        reply(200, good_body(&req))
    });
    let r = probe(&backend(&url, 5000), PROMPT, &["Ann", "Bob"], 4).unwrap();
    assert_eq!(r.subject_index("Ann"), Some(1));
    assert_eq!(r.subject_index("Bob"), None);
    assert_eq!(r.subjects["Bob"], None);
    assert_eq!(r.dist.k(), 4);
    assert_eq!(r.prompt_id, prompt_id(PROMPT));
}

#[test]
fn server_errors_are_retried() {
    let (url, count) = serve(|n, req| {
        if n < 2 {
            reply(503, "busy")
        } else {
            reply(200, good_body(&req))
        }
    });
    probe(&backend(&url, 5000), PROMPT, &["Ann", "Bob"], 4).unwrap();
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let (url, count) = serve(|_, _| reply(500, "down"));
    let err = probe(&backend(&url, 5000), PROMPT, &["Ann", "Bob"], 4).unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 3, .. }), "{err}");
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, count) = serve(|_, _| reply(422, "bad k"));
    let err = probe(&backend(&url, 5000), PROMPT, &["Ann", "Bob"], 4).unwrap_err();
    assert!(matches!(err, BackendError::Status(422)), "{err}");
    assert_eq!(count.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_body_is_rejected() {
    let (url, _) = serve(|_, _| reply(200, "{\"prompt_id\": 3"));
    let err = probe(&backend(&url, 5000), PROMPT, &["Ann", "Bob"], 4).unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)), "{err}");
}

#[test]
fn short_or_unsorted_topk_is_rejected() {
    let (url, _) = serve(|_, mut req| {
        req.k -= 1;
        reply(200, good_body(&req))
    });
    let err = probe(&backend(&url, 5000), PROMPT, &["Ann", "Bob"], 4).unwrap_err();
    assert!(matches!(err, BackendError::Malformed(_)), "{err}");

    let (url, _) = serve(|_, req| {
        let mut v: serde_json::Value = serde_json::from_str(&good_body(&req)).unwrap();
        v["topk"][3][1] = serde_json::json!(0.9);
        reply(200, v.to_string())
    });
    let err = probe(&backend(&url, 5000), PROMPT, &["Ann", "Bob"], 4).unwrap_err();
    assert!(matches!(err, BackendError::InvalidDistribution(_)), "{err}");
}

#[test]
fn mismatched_prompt_id_is_rejected() {
    let (url, _) = serve(|_, mut req| {
        req.prompt.push('!');
        reply(200, good_body(&req))
    });
    let err = probe(&backend(&url, 5000), PROMPT, &["Ann", "Bob"], 4).unwrap_err();
    assert!(err.to_string().contains("prompt_id"), "{err}");
}

#[test]
fn slow_server_times_out() {
    let (url, count) = serve(|_, req| Reply {
        delay: Duration::from_millis(800),
        ..reply(200, good_body(&req))
    });
    let err = probe(&backend(&url, 100), PROMPT, &["Ann", "Bob"], 4).unwrap_err();
    assert!(matches!(err, BackendError::Transport { .. }), "{err}");
    assert_eq!(count.load(Ordering::SeqCst), 3);
}

#[test]
fn endpoint_must_be_http() {
    assert!(HttpBackend::open("ftp://x", HttpConfig::default()).is_err());
}
