use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use densescan::llmgate::{
    vars, BackendConfig, BackendFailure, ChatBackend, ChatRequest, Gateway, LlmError, MockBackend,
    MockRule, OpenAiBackend, ResponseCache, RetryPolicy, VirtualClock,
};

fn request(desc: &str) -> ChatRequest {
    ChatRequest::from_template(
        "mock",
        "identify_object",
        vars([("description", desc), ("candidates", "chair, table")]),
        Vec::new(),
        0.2,
        32,
    )
    .unwrap()
}

fn policy(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_delay_ms: 100,
        max_delay_ms: 10_000,
    }
}

#[test]
fn cache_hit_makes_no_dispatch() {
    let dir = tempfile::tempdir().unwrap();
    let mock = Arc::new(MockBackend::new(3));
    let gw = Gateway::new("mock", mock.clone()).with_cache(ResponseCache::open(dir.path(), "mock").unwrap());
    let first = gw.complete(&request("a red chair"), &policy(3)).unwrap();
    assert!(!first.cached);
    assert_eq!(first.response_text, "chair");
    let second = gw.complete(&request("a red chair"), &policy(3)).unwrap();
    assert!(second.cached);
    assert_eq!(second.response_text, first.response_text);
    assert_eq!(second.request_hash, first.request_hash);
    assert_eq!(mock.call_count(), 1);

    // A fresh gateway over the same cache directory also dispatches nothing.
    let mock2 = Arc::new(MockBackend::new(3));
    let gw2 = Gateway::new("mock", mock2.clone()).with_cache(ResponseCache::open(dir.path(), "mock").unwrap());
    assert!(gw2.complete(&request("a red chair"), &policy(3)).unwrap().cached);
    assert_eq!(mock2.call_count(), 0);
    assert!(dir.path().join("mock.jsonl").exists());
}

#[test]
fn attempts_are_min_of_needed_and_max() {
    for failures in 0..5usize {
        for max in 1..5u32 {
            let clock = Arc::new(VirtualClock::new());
            let mock = Arc::new(MockBackend::new(0).failing_first(failures));
            let gw = Gateway::new("mock", mock.clone()).with_clock(clock.clone());
            let needed = failures as u32 + 1;
            match gw.complete(&request("chair"), &policy(max)) {
                Ok(ex) => {
                    assert!(needed <= max);
                    assert_eq!(ex.attempts, needed);
                }
                Err(LlmError::BackendUnavailable { attempts, .. }) => {
                    assert!(needed > max);
                    assert_eq!(attempts, max);
                }
                Err(e) => panic!("{e}"),
            }
            assert_eq!(mock.call_count() as u32, needed.min(max));
            let sleeps: Vec<u64> = clock.sleeps().iter().map(|d| d.as_millis() as u64).collect();
            let expected: Vec<u64> = (0..needed.min(max) - 1).map(|i| 100 << i).collect();
            assert_eq!(sleeps, expected);
        }
    }
}

#[test]
fn fail_twice_then_succeed_with_three_attempts() {
    let gw = Gateway::new("mock", Arc::new(MockBackend::new(0).failing_first(2)))
        .with_clock(Arc::new(VirtualClock::new()));
    assert_eq!(gw.complete(&request("chair"), &policy(3)).unwrap().attempts, 3);
}

#[test]
fn always_failing_backend_is_unavailable() {
    let mock = MockBackend::new(0).with_rule(MockRule::fail(BackendFailure::Transient("down".into()), None));
    let gw = Gateway::new("mock", Arc::new(mock)).with_clock(Arc::new(VirtualClock::new()));
    assert!(matches!(
        gw.complete(&request("chair"), &policy(2)),
        Err(LlmError::BackendUnavailable { attempts: 2, .. })
    ));
}

#[test]
fn refusal_is_not_retried() {
    let mock = Arc::new(MockBackend::new(0).with_rule(MockRule::fail(BackendFailure::Refusal("policy".into()), None)));
    let gw = Gateway::new("mock", mock.clone());
    assert!(matches!(gw.complete(&request("chair"), &policy(5)), Err(LlmError::ContentRefusal(_))));
    assert_eq!(mock.call_count(), 1);
}

#[test]
fn budget_caps_dispatches() {
    let gw = Gateway::new("mock", Arc::new(MockBackend::new(0))).with_budget(2);
    gw.complete(&request("a"), &policy(1)).unwrap();
    gw.complete(&request("b"), &policy(1)).unwrap();
    assert!(matches!(
        gw.complete(&request("c"), &policy(1)),
        Err(LlmError::BudgetExceeded { cap: 2 })
    ));
    assert_eq!(gw.dispatch_count(), 2);
}

/// Backend that records the virtual time of each dispatch.
struct Stamping {
    clock: Arc<VirtualClock>,
    stamps: Mutex<Vec<Duration>>,
}

impl ChatBackend for Stamping {
    fn model(&self) -> &str {
        "stamp"
    }
    fn dispatch(&self, _: &ChatRequest) -> Result<String, BackendFailure> {
        use densescan::llmgate::Clock;
        self.stamps.lock().unwrap().push(self.clock.now());
        Ok("x".into())
    }
}

#[test]
fn rate_limit_never_exceeded_across_threads() {
    let clock = Arc::new(VirtualClock::new());
    let backend = Arc::new(Stamping {
        clock: clock.clone(),
        stamps: Mutex::new(Vec::new()),
    });
    let gw = Arc::new(Gateway::new("stamp", backend.clone()).with_rate_limit(3.0).with_clock(clock.clone()));
    std::thread::scope(|s| {
        for t in 0..4 {
            let gw = gw.clone();
            s.spawn(move || {
                for i in 0..10 {
                    gw.complete(&request(&format!("{t}-{i}")), &policy(1)).unwrap();
                }
            });
        }
    });
    let mut stamps = backend.stamps.lock().unwrap().clone();
    stamps.sort();
    assert_eq!(stamps.len(), 40);
    for (i, &t) in stamps.iter().enumerate() {
        let in_window = stamps[i..].iter().filter(|&&s| s < t + Duration::from_secs(1)).count();
        assert!(in_window <= 3, "{in_window} dispatches in the second after {t:?}");
    }
    assert!(*stamps.last().unwrap() >= Duration::from_secs(13));
}

/// Minimal HTTP/1.1 server answering each connection with the next canned
/// response and recording request bodies and headers.
fn stub_server(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<(String, String)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let seen2 = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = String::new();
            let mut len = 0usize;
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
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            seen2.lock().unwrap().push((headers, String::from_utf8(buf).unwrap()));
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

#[test]
fn openai_backend_round_trip_with_retry() {
    let ok = r#"{"choices":[{"message":{"role":"assistant","content":"chair"},"finish_reason":"stop"}]}"#;
    let (url, seen) = stub_server(vec![(503, "{}".into()), (200, ok.into())]);
    std::env::set_var("DENSESCAN_TEST_KEY", "sk-test");
    let cfg = BackendConfig {
        backend_id: "vlm".into(),
        base_url: url,
        model: "some-vlm".into(),
        api_key_env: Some("DENSESCAN_TEST_KEY".into()),
        rate_limit_per_s: Some(50.0),
        max_attempts: 3,
        kind: Default::default(),
        mock_seed: 0,
        timeout_s: Some(10),
    };
    let gw = Gateway::from_config(&cfg, None).unwrap().with_clock(Arc::new(VirtualClock::new()));
    let png: Arc<[u8]> = Arc::from(&b"\x89PNG fake"[..]);
    let req = ChatRequest::from_template(
        "vlm",
        "object_caption",
        vars([("category", "chair")]),
        vec![png],
        0.2,
        128,
    )
    .unwrap();
    let ex = gw.complete(&req, &cfg.retry_policy()).unwrap();
    assert_eq!(ex.response_text, "chair");
    assert_eq!(ex.attempts, 2);
    assert_eq!(ex.backend_model, "some-vlm");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let (headers, body) = &seen[1];
    assert!(headers.to_ascii_lowercase().contains("authorization: bearer sk-test"));
    assert!(headers.starts_with("POST /v1/chat/completions"));
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["model"], "some-vlm");
    assert_eq!(v["messages"][0]["role"], "system");
    let url = v["messages"][1]["content"][1]["image_url"]["url"].as_str().unwrap();
    assert_eq!(url, "data:image/png;base64,iVBORyBmYWtl");
}

#[test]
fn openai_client_errors_are_fatal() {
    let (url, _) = stub_server(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let backend = OpenAiBackend::new(&url, "m", None, Duration::from_secs(5)).unwrap();
    let gw = Gateway::new("vlm", Arc::new(backend));
    match gw.complete(&request("x"), &policy(4)) {
        Err(LlmError::BackendUnavailable { attempts: 1, detail }) => assert!(detail.contains("401")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_credential_variable_is_a_config_error() {
    let cfg = BackendConfig {
        api_key_env: Some("DENSESCAN_DEFINITELY_UNSET".into()),
        base_url: "http://127.0.0.1:9".into(),
        kind: Default::default(),
        ..BackendConfig::mock("vlm", 0)
    };
    assert!(matches!(Gateway::from_config(&cfg, None), Err(LlmError::Config(_))));
}
