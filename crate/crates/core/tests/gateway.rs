use std::collections::BTreeMap;
use std::path::Path;

use rovi_core::datamodel::{canonical_json, Digest128};
use rovi_core::fixtures::png_bytes;
use rovi_core::gateway::mock::{serve_mocks, Fallback, MockConfig, MockFixtures, MockServer};
use rovi_core::gateway::{
    detect_request_body, BackendKind, BackendSpec, ChatRequest, Gateway, GatewayError, Message, Part,
};

fn spec(id: &str, kind: BackendKind, endpoint: String, retries: u32) -> BackendSpec {
    let mut s = BackendSpec::new(id, kind, endpoint);
    s.max_retries = retries;
    s.backoff_base = 0.001;
    s.timeout = 10.0;
    s
}

fn text_request(text: &str) -> ChatRequest {
    ChatRequest::new(vec![Message::user(vec![Part::Text(text.into())])], 64)
}

fn image() -> Vec<u8> {
    png_bytes(&image::RgbImage::from_fn(64, 48, |x, y| image::Rgb([(x * 4) as u8, (y * 5) as u8, 90])))
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, canonical_json(value)).unwrap();
}

fn error_only(fail_first: &[(&str, u32)]) -> MockConfig {
    MockConfig {
        fallback: Fallback::Error,
        fail_first: fail_first.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        ..Default::default()
    }
}

#[test]
fn chat_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut req = text_request("hello");
    req.model = "m".into();
    let digest = Digest128::of_value(&req.to_wire());
    write_json(
        &dir.path().join("chat").join(format!("{digest}.json")),
        &serde_json::json!({
            "choices": [{"message": {"content": "canned"}, "finish_reason": "stop"}]
        }),
    );
    let mut fx = MockFixtures::load(dir.path()).unwrap();
    fx.config.fallback = Fallback::Error;
    let server = serve_mocks(fx, 0).unwrap();
    let mut s = spec("llm", BackendKind::Chat, server.chat_url(), 0);
    s.model_name = "m".into();
    let gw = Gateway::new([s], None).unwrap();
    assert_eq!(gw.chat_complete("llm", &text_request("hello")).unwrap().content, "canned");
    let err = gw.chat_complete("llm", &text_request("unknown")).unwrap_err();
    assert!(matches!(err, GatewayError::Status { status: 404, .. }), "{err}");
    assert_eq!(server.request_log().iter().map(|r| r.served.as_str()).collect::<Vec<_>>(), ["fixture", "error"]);
}

#[test]
fn transient_faults_are_retried() {
    let server = serve_mocks(
        MockFixtures::with_config(MockConfig { fail_first: [("chat".to_string(), 2)].into(), ..Default::default() }),
        0,
    )
    .unwrap();
    let gw = Gateway::new([spec("llm", BackendKind::Chat, server.chat_url(), 3)], None).unwrap();
    let resp = gw.chat_complete("llm", &text_request("\"\"\"- red car\"\"\"")).unwrap();
    assert_eq!(resp.content, "- red\n- car\n");
    let m = gw.metrics("llm");
    assert_eq!((m.calls, m.retries, m.failures), (3, 2, 0));
}

#[test]
fn zero_retries_fail_fast() {
    let server = serve_mocks(
        MockFixtures::with_config(MockConfig { fail_first: [("chat".to_string(), 1)].into(), ..Default::default() }),
        0,
    )
    .unwrap();
    let gw = Gateway::new([spec("llm", BackendKind::Chat, server.chat_url(), 0)], None).unwrap();
    let err = gw.chat_complete("llm", &text_request("x")).unwrap_err();
    match err {
        GatewayError::Exhausted { attempts: 1, cause, .. } => {
            assert!(matches!(*cause, GatewayError::Status { status: 503, .. }))
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(gw.metrics("llm").failures, 1);
}

#[test]
fn response_cache_avoids_repeat_calls() {
    let server = serve_mocks(MockFixtures::default(), 0).unwrap();
    let cache = tempfile::tempdir().unwrap();
    let specs = || [spec("llm", BackendKind::Chat, server.chat_url(), 0)];
    let req = text_request("\"\"\"- blue kite\"\"\"");
    let first = Gateway::new(specs(), Some(cache.path().to_path_buf())).unwrap();
    let a = first.chat_complete("llm", &req).unwrap();
    assert_eq!(first.chat_complete("llm", &req).unwrap(), a);
    assert_eq!((first.metrics("llm").calls, first.metrics("llm").cache_hits), (1, 1));
    // A fresh gateway over the same directory answers from disk.
    let second = Gateway::new(specs(), Some(cache.path().to_path_buf())).unwrap();
    assert_eq!(second.chat_complete("llm", &req).unwrap(), a);
    assert_eq!((second.metrics("llm").calls, second.metrics("llm").cache_hits), (0, 1));
    assert_eq!(server.request_log().len(), 1);
}

fn scripted_detector(dets: serde_json::Value) -> (tempfile::TempDir, MockServer, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let img = image();
    write_json(
        &dir.path().join("detect/gd").join(format!("image-{}.json", Digest128::of_bytes(&img))),
        &serde_json::json!({ "detections": dets }),
    );
    let mut fx = MockFixtures::load(dir.path()).unwrap();
    fx.config = error_only(&[]);
    let server = serve_mocks(fx, 0).unwrap();
    (dir, server, img)
}

#[test]
fn scripted_detections_filter_by_request() {
    let (_dir, server, img) = scripted_detector(serde_json::json!([
        {"bbox": [1.0, 2.0, 30.0, 40.0], "category": "dog", "score": 0.9},
        {"bbox": [5.0, 5.0, 20.0, 20.0], "category": "cat", "score": 0.1},
    ]));
    let gw = Gateway::new([spec("gd", BackendKind::Detector, server.detect_url("gd"), 0)], None).unwrap();
    let cats = vec!["dog".to_string(), "cat".to_string()];
    let dets = gw.detect_request("gd", &img, &cats, 0.2).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].category, "dog");
    assert!(gw.detect_request("gd", &img, &["bird".to_string()], 0.0).unwrap().is_empty());
}

#[test]
fn unrequested_category_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = image();
    let cats = vec!["dog".to_string()];
    let body = detect_request_body(&img, &cats, 0.2);
    write_json(
        &dir.path().join("detect/gd").join(format!("{}.json", Digest128::of_value(&body))),
        &serde_json::json!({"detections": [{"bbox": [0.0, 0.0, 10.0, 10.0], "category": "dragon", "score": 0.5}]}),
    );
    let mut fx = MockFixtures::load(dir.path()).unwrap();
    fx.config = error_only(&[]);
    let server = serve_mocks(fx, 0).unwrap();
    let gw = Gateway::new([spec("gd", BackendKind::Detector, server.detect_url("gd"), 3)], None).unwrap();
    let err = gw.detect_request("gd", &img, &cats, 0.2).unwrap_err();
    assert!(matches!(&err, GatewayError::Protocol { message, .. } if message.contains("dragon")), "{err}");
    assert_eq!(gw.metrics("gd").retries, 0, "protocol violations are not retried");
}

#[test]
fn template_detectors_are_deterministic_and_distinct() {
    let server = serve_mocks(MockFixtures::default(), 0).unwrap();
    let ids = ["gd", "yw", "ow", "od"];
    let gw = Gateway::new(ids.map(|id| spec(id, BackendKind::Detector, server.detect_url(id), 0)), None).unwrap();
    let cats: Vec<String> =
        ["red umbrella", "black cat", "oak tree", "cockatoo", "brass lamp"].map(String::from).into();
    let img = image();
    let mut seen = BTreeMap::new();
    for id in ids {
        let a = gw.detect_request(id, &img, &cats, 0.0).unwrap();
        assert_eq!(a, gw.detect_request(id, &img, &cats, 0.0).unwrap());
        assert!(a.iter().all(|d| d.bbox.within(64.0, 48.0)));
        seen.insert(id, a);
    }
    let first = &seen["gd"];
    assert!(seen.values().any(|v| v != first), "detectors should disagree somewhere");
}

#[test]
fn scorer_and_kinds() {
    let server = serve_mocks(MockFixtures::default(), 0).unwrap();
    let gw = Gateway::new(
        [spec("aes", BackendKind::Scorer, server.score_url(), 0), spec("llm", BackendKind::Chat, server.chat_url(), 0)],
        None,
    )
    .unwrap();
    let s = gw.score("aes", &image()).unwrap();
    assert!((4.0..8.0).contains(&s));
    assert!(matches!(gw.score("llm", &image()), Err(GatewayError::WrongKind { .. })));
    assert!(matches!(gw.score("nope", &image()), Err(GatewayError::UnknownBackend(_))));
}

#[test]
fn verify_requests_carry_log_probabilities() {
    let server = serve_mocks(MockFixtures::default(), 0).unwrap();
    let gw = Gateway::new([spec("v", BackendKind::Chat, server.chat_url(), 0)], None).unwrap();
    let mut req = ChatRequest::new(
        vec![Message::user(vec![
            Part::Image { mime: "image/png".into(), data: image() },
            Part::Text("Is this a cat?".into()),
        ])],
        1,
    );
    req.logprobs = true;
    req.top_logprobs = Some(20);
    let resp = gw.chat_complete("v", &req).unwrap();
    let alts = resp.alternatives.unwrap();
    assert!(!alts.is_empty() && alts.len() <= 20);
    let mass: f64 = alts.iter().map(|a| a.logprob.exp()).sum();
    assert!(mass <= 1.0 + 1e-9);
}

#[test]
fn malformed_http_is_rejected_by_the_mock() {
    use std::io::{Read, Write};
    let server = serve_mocks(MockFixtures::default(), 0).unwrap();
    let mut s = std::net::TcpStream::connect(("127.0.0.1", server.port())).unwrap();
    s.write_all(b"garbage\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    assert!(out.starts_with("HTTP/1.1 400"), "{out}");
    let mut s = std::net::TcpStream::connect(("127.0.0.1", server.port())).unwrap();
    s.write_all(b"GET /health HTTP/1.1\r\nconnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    assert!(out.starts_with("HTTP/1.1 200") && out.ends_with("{\"status\":\"ok\"}"), "{out}");
}
