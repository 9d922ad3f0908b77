//! Deterministic stand-ins for the model services.
//!
//! Routes:
//! - `POST /v1/chat/completions`
//! - `POST /v1/detect/{detector_id}`
//! - `POST /v1/score`
//! - `GET /health`
//!
//! Fixture directory layout:
//!
//! ```text
//! mock.toml                          optional MockConfig
//! chat/<request-digest>.json         canned chat response body
//! detect/<id>/<request-digest>.json  canned detection response body
//! detect/<id>/image-<digest>.json    scripted box set for an image; filtered
//!                                    by the requested categories and threshold
//! ```
//!
//! Requests without a fixture get either an error or a template response
//! computed purely from the request content, so a whole pipeline run is
//! reproducible byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::wire::{decode_image_field, ChatRequest, ChatResponse, RawDetection, TokenAlternative};
use crate::datamodel::{canonical_json, fnv1a64, Digest128};
use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot bind mock server on port {port}: {message}")]
    Bind { port: u16, message: String },
    #[error("fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fallback {
    Error,
    #[default]
    Template,
}

/// How a template detector behaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Personality {
    /// Probability that a requested category yields a box.
    pub recall: f64,
    /// Box jitter as a fraction of box size.
    pub jitter: f64,
    pub score_min: f64,
    pub score_max: f64,
    /// Probability of a second, displaced box for a detected category.
    pub extra_rate: f64,
}

impl Default for Personality {
    fn default() -> Self {
        Personality { recall: 0.6, jitter: 0.08, score_min: 0.15, score_max: 0.9, extra_rate: 0.2 }
    }
}

impl Personality {
    /// Four distinct default behaviours for the conventional ensemble ids.
    pub fn preset(id: &str) -> Self {
        match id {
            "gd" => Personality { recall: 0.70, jitter: 0.05, score_min: 0.20, score_max: 0.90, extra_rate: 0.25 },
            "yw" => Personality { recall: 0.55, jitter: 0.10, score_min: 0.10, score_max: 0.80, extra_rate: 0.15 },
            "ow" => Personality { recall: 0.65, jitter: 0.07, score_min: 0.15, score_max: 0.95, extra_rate: 0.30 },
            "od" => Personality { recall: 0.45, jitter: 0.12, score_min: 0.25, score_max: 0.85, extra_rate: 0.10 },
            _ => Personality::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub fallback: Fallback,
    /// Route key (`chat`, `detect/<id>`, `score`) → number of leading
    /// requests answered with HTTP 503.
    pub fail_first: BTreeMap<String, u32>,
    pub detectors: BTreeMap<String, Personality>,
    /// Write every template response back into the fixture directory.
    pub record: bool,
    /// Append one JSON line per request to this file.
    pub log_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedRequest {
    pub route: String,
    pub digest: String,
    /// `fixture`, `template`, `error` or `fault`.
    pub served: String,
}

#[derive(Debug, Clone, Default)]
pub struct MockFixtures {
    pub config: MockConfig,
    pub root: Option<PathBuf>,
    chat: HashMap<Digest128, Value>,
    detect: HashMap<(String, Digest128), Value>,
    scripted: HashMap<(String, Digest128), Vec<RawDetection>>,
}

fn read_json(path: &Path) -> Result<Value, MockError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MockError::Fixture { path: path.to_path_buf(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| MockError::Fixture { path: path.to_path_buf(), message: e.to_string() })
}

fn digest_from_stem(path: &Path, prefix: &str) -> Option<Digest128> {
    path.file_stem()?.to_str()?.strip_prefix(prefix)?.parse().ok()
}

impl MockFixtures {
    pub fn with_config(config: MockConfig) -> Self {
        MockFixtures { config, ..Default::default() }
    }

    pub fn load(dir: &Path) -> Result<Self, MockError> {
        let mut fx = MockFixtures { root: Some(dir.to_path_buf()), ..Default::default() };
        let cfg_path = dir.join("mock.toml");
        if cfg_path.exists() {
            let text = std::fs::read_to_string(&cfg_path)
                .map_err(|e| MockError::Fixture { path: cfg_path.clone(), message: e.to_string() })?;
            fx.config = toml::from_str(&text)
                .map_err(|e| MockError::Fixture { path: cfg_path.clone(), message: e.to_string() })?;
            if let Some(log) = &fx.config.log_file {
                if log.is_relative() {
                    fx.config.log_file = Some(dir.join(log));
                }
            }
        }
        for path in json_files(&dir.join("chat"))? {
            let digest = digest_from_stem(&path, "").ok_or_else(|| MockError::Fixture {
                path: path.clone(),
                message: "file name is not a digest".into(),
            })?;
            fx.chat.insert(digest, read_json(&path)?);
        }
        let detect_dir = dir.join("detect");
        if detect_dir.is_dir() {
            let entries = std::fs::read_dir(&detect_dir)
                .map_err(|e| MockError::Fixture { path: detect_dir.clone(), message: e.to_string() })?;
            for entry in entries.flatten().filter(|e| e.path().is_dir()) {
                let id = entry.file_name().to_string_lossy().to_string();
                for path in json_files(&entry.path())? {
                    if let Some(digest) = digest_from_stem(&path, "image-") {
                        let body = read_json(&path)?;
                        let dets: Vec<RawDetection> = serde_json::from_value(body["detections"].clone())
                            .map_err(|e| MockError::Fixture { path: path.clone(), message: e.to_string() })?;
                        fx.scripted.insert((id.clone(), digest), dets);
                    } else if let Some(digest) = digest_from_stem(&path, "") {
                        fx.detect.insert((id.clone(), digest), read_json(&path)?);
                    } else {
                        return Err(MockError::Fixture { path, message: "file name is not a digest".into() });
                    }
                }
            }
        }
        Ok(fx)
    }
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, MockError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| MockError::Fixture { path: dir.to_path_buf(), message: e.to_string() })?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

struct State {
    fixtures: MockFixtures,
    counters: Mutex<HashMap<String, AtomicU32>>,
    log: Mutex<Vec<LoggedRequest>>,
}

/// A running mock service. Stops accepting when dropped.
pub struct MockServer {
    state: Arc<State>,
    shutdown: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    port: u16,
}

impl MockServer {
    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn chat_url(&self) -> String {
        format!("{}/v1/chat/completions", self.url())
    }

    pub fn detect_url(&self, detector: &str) -> String {
        format!("{}/v1/detect/{detector}", self.url())
    }

    pub fn score_url(&self) -> String {
        format!("{}/v1/score", self.url())
    }

    pub fn request_log(&self) -> Vec<LoggedRequest> {
        self.state.log.lock().expect("log poisoned").clone()
    }

    /// Blocks for the lifetime of the process.
    pub fn wait(mut self) {
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Wake the blocking accept so the loop sees the flag.
        let _ = TcpStream::connect(("127.0.0.1", self.port));
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }
}

const IDLE_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_HEADER_BYTES: usize = 64 * 1024;

/// Starts the mock service on `127.0.0.1:port` (0 picks a free port). Each
/// connection gets its own thread, so idle keep-alive clients never starve
/// new ones.
pub fn serve_mocks(fixtures: MockFixtures, port: u16) -> Result<MockServer, MockError> {
    let listener =
        TcpListener::bind(("127.0.0.1", port)).map_err(|e| MockError::Bind { port, message: e.to_string() })?;
    let port = listener.local_addr().map(|a| a.port()).unwrap_or(port);
    let state = Arc::new(State { fixtures, counters: Mutex::new(HashMap::new()), log: Mutex::new(Vec::new()) });
    let shutdown = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let (state, shutdown) = (Arc::clone(&state), Arc::clone(&shutdown));
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                if shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let state = Arc::clone(&state);
                std::thread::spawn(move || {
                    if let Err(e) = serve_connection(stream, &state) {
                        tracing::debug!(error = %e, "mock connection closed");
                    }
                });
            }
        })
    };
    Ok(MockServer { state, shutdown, acceptor: Some(acceptor), port })
}

fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        411 => "Length Required",
        431 => "Request Header Fields Too Large",
        503 => "Service Unavailable",
        _ => "Error",
    }
}

fn write_response(out: &mut TcpStream, status: u16, payload: &Value, close: bool) -> std::io::Result<()> {
    let body = canonical_json(payload);
    let connection = if close { "close" } else { "keep-alive" };
    // One write per response; piecewise writes stall on Nagle plus delayed ACK.
    let response = format!(
        "HTTP/1.1 {status} {}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: {connection}\r\n\r\n{body}",
        reason_phrase(status),
        body.len()
    );
    out.write_all(response.as_bytes())?;
    out.flush()
}

/// Serves requests on one connection until the peer closes it or goes idle.
fn serve_connection(stream: TcpStream, state: &State) -> std::io::Result<()> {
    stream.set_read_timeout(Some(IDLE_TIMEOUT))?;
    stream.set_nodelay(true)?;
    let mut out = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    loop {
        let mut head = Vec::new();
        loop {
            let n = reader.read_until(b'\n', &mut head)?;
            if n == 0 {
                return Ok(());
            }
            if head == b"\r\n" {
                // Stray line break between requests.
                head.clear();
                continue;
            }
            if head.ends_with(b"\r\n\r\n") {
                break;
            }
            if head.len() > MAX_HEADER_BYTES {
                return write_response(&mut out, 431, &json!({"error": "headers too large"}), true);
            }
        }
        let mut headers = [httparse::EMPTY_HEADER; 64];
        let mut req = httparse::Request::new(&mut headers);
        if !matches!(req.parse(&head), Ok(httparse::Status::Complete(_))) {
            return write_response(&mut out, 400, &json!({"error": "malformed request"}), true);
        }
        let header = |name: &str| {
            req.headers
                .iter()
                .find(|h| h.name.eq_ignore_ascii_case(name))
                .map(|h| String::from_utf8_lossy(h.value).trim().to_ascii_lowercase())
        };
        if header("transfer-encoding").is_some() {
            return write_response(&mut out, 411, &json!({"error": "send a content-length body"}), true);
        }
        let length: usize = match header("content-length").map(|v| v.parse()) {
            None => 0,
            Some(Ok(n)) => n,
            Some(Err(_)) => return write_response(&mut out, 400, &json!({"error": "bad content-length"}), true),
        };
        let close = header("connection").is_some_and(|v| v.contains("close")) || req.version == Some(0);
        let (method, path) = (req.method.unwrap_or("").to_string(), req.path.unwrap_or("").to_string());
        let mut body = vec![0u8; length];
        reader.read_exact(&mut body)?;
        let (status, payload) = match String::from_utf8(body) {
            Ok(text) => state.handle(&method, &path, &text),
            Err(e) => (400, json!({"error": e.to_string()})),
        };
        write_response(&mut out, status, &payload, close)?;
        if close {
            return Ok(());
        }
    }
}

impl State {
    fn handle(&self, method: &str, url: &str, body: &str) -> (u16, Value) {
        if method == "GET" && url == "/health" {
            return (200, json!({"status": "ok"}));
        }
        let route = match url {
            "/v1/chat/completions" => "chat".to_string(),
            "/v1/score" => "score".to_string(),
            u => match u.strip_prefix("/v1/detect/") {
                Some(id) if !id.is_empty() && !id.contains('/') => format!("detect/{id}"),
                _ => return (404, json!({"error": format!("no route {url}")})),
            },
        };
        let parsed: Value = match serde_json::from_str(body) {
            Ok(v) => v,
            Err(e) => return (400, json!({"error": e.to_string()})),
        };
        let digest = Digest128::of_value(&parsed);

        if self.inject_fault(&route) {
            self.log(&route, &digest, "fault");
            return (503, json!({"error": "injected fault"}));
        }

        let result = if route == "chat" {
            self.chat(&parsed, &digest)
        } else if route == "score" {
            self.score(&parsed)
        } else {
            self.detect(&route["detect/".len()..], &parsed, &digest)
        };
        match result {
            Ok((served, value)) => {
                if served == "template" && self.fixtures.config.record {
                    self.record(&route, &digest, &value);
                }
                self.log(&route, &digest, served);
                (200, value)
            }
            Err((status, message)) => {
                self.log(&route, &digest, "error");
                (status, json!({"error": message}))
            }
        }
    }

    fn inject_fault(&self, route: &str) -> bool {
        let budget = self.fixtures.config.fail_first.get(route).copied().unwrap_or(0);
        if budget == 0 {
            return false;
        }
        let mut counters = self.counters.lock().expect("counters poisoned");
        let c = counters.entry(route.to_string()).or_insert_with(|| AtomicU32::new(0));
        c.fetch_add(1, Ordering::SeqCst) < budget
    }

    fn log(&self, route: &str, digest: &Digest128, served: &str) {
        let entry = LoggedRequest { route: route.to_string(), digest: digest.to_hex(), served: served.to_string() };
        if let Some(path) = &self.fixtures.config.log_file {
            if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(path) {
                let _ = writeln!(f, "{}", serde_json::to_string(&entry).unwrap_or_default());
            }
        }
        self.log.lock().expect("log poisoned").push(entry);
    }

    fn record(&self, route: &str, digest: &Digest128, value: &Value) {
        let Some(root) = &self.fixtures.root else { return };
        let dir = root.join(route);
        if std::fs::create_dir_all(&dir).is_ok() {
            let _ = std::fs::write(dir.join(format!("{digest}.json")), canonical_json(value));
        }
    }

    fn template_allowed(&self) -> Result<(), (u16, String)> {
        match self.fixtures.config.fallback {
            Fallback::Template => Ok(()),
            Fallback::Error => Err((404, "no fixture for request".into())),
        }
    }

    fn chat(&self, body: &Value, digest: &Digest128) -> Result<(&'static str, Value), (u16, String)> {
        if let Some(v) = self.fixtures.chat.get(digest) {
            return Ok(("fixture", v.clone()));
        }
        self.template_allowed()?;
        let req = ChatRequest::from_wire(body).map_err(|e| (400, e))?;
        Ok(("template", template_chat(&req, digest).to_wire()))
    }

    fn detect(&self, id: &str, body: &Value, digest: &Digest128) -> Result<(&'static str, Value), (u16, String)> {
        if let Some(v) = self.fixtures.detect.get(&(id.to_string(), *digest)) {
            return Ok(("fixture", v.clone()));
        }
        let image = decode_image_field(body).map_err(|e| (400, e))?;
        let categories: Vec<String> =
            serde_json::from_value(body["categories"].clone()).map_err(|e| (400, e.to_string()))?;
        let threshold = body["score_threshold"].as_f64().unwrap_or(0.0);
        let image_digest = Digest128::of_bytes(&image);
        if let Some(script) = self.fixtures.scripted.get(&(id.to_string(), image_digest)) {
            let dets: Vec<&RawDetection> =
                script.iter().filter(|d| categories.contains(&d.category) && d.score >= threshold).collect();
            return Ok(("fixture", json!({"detections": dets})));
        }
        self.template_allowed()?;
        let (w, h) = image::ImageReader::new(Cursor::new(&image))
            .with_guessed_format()
            .map_err(|e| (400, e.to_string()))?
            .into_dimensions()
            .map_err(|e| (400, e.to_string()))?;
        let personality = self.fixtures.config.detectors.get(id).cloned().unwrap_or_else(|| Personality::preset(id));
        let dets = template_detections(id, &personality, &image_digest, w, h, &categories, threshold);
        Ok(("template", json!({"detections": dets})))
    }

    fn score(&self, body: &Value) -> Result<(&'static str, Value), (u16, String)> {
        self.template_allowed()?;
        let image = decode_image_field(body).map_err(|e| (400, e))?;
        let h = fnv1a64(Digest128::of_bytes(&image).0.as_slice());
        let score = 4.0 + 4.0 * unit(h);
        Ok(("template", json!({"score": (score * 1000.0).round() / 1000.0})))
    }
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn mix(parts: &[&[u8]]) -> u64 {
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        buf.extend_from_slice(p);
    }
    fnv1a64(&buf)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

const STYLES: &[&str] =
    &["color photograph", "black and white photograph", "digital illustration", "watercolor painting"];

const OBJECTS: &[&str] = &[
    "red umbrella",
    "wooden bench",
    "black cat",
    "chocolate cake with ganache drip",
    "vintage bicycle",
    "potted plant",
    "glass vase",
    "striped pillow",
    "brass lamp",
    "stone fountain",
    "white sailboat",
    "yellow taxi",
    "leather armchair",
    "ceramic mug",
    "oak tree",
    "gold medal",
    "navy blazer",
    "horse-drawn caravan",
    "wallpaper mural",
    "cockatoo",
];

const STOPWORDS: &[&str] = &["a", "an", "the", "with", "and", "or", "of", "in", "on"];

/// Text between pairs of `"""` markers.
fn quoted_blocks(text: &str) -> Vec<String> {
    text.split("\"\"\"").skip(1).step_by(2).map(|s| s.trim().to_string()).collect()
}

fn template_chat(req: &ChatRequest, digest: &Digest128) -> ChatResponse {
    if req.has_image() && req.max_tokens == 1 {
        return template_verify(req, digest);
    }
    let content = if req.has_image() {
        let image = req.messages.iter().flat_map(|m| m.images()).next().unwrap_or_default();
        template_describe(&Digest128::of_bytes(image))
    } else {
        let blocks = quoted_blocks(&req.text());
        match blocks.len() {
            0 => String::new(),
            1 => template_decompose(&blocks[0]),
            _ => template_summarize(&blocks[0], &blocks[1]),
        }
    };
    ChatResponse { content, alternatives: None, finish_reason: Some("stop".into()) }
}

fn template_describe(image: &Digest128) -> String {
    let seed = fnv1a64(&image.0);
    let style = STYLES[(seed % STYLES.len() as u64) as usize];
    let count = 3 + (seed >> 8) as usize % 4;
    let mut picked: Vec<&str> = Vec::new();
    let mut k = 0u64;
    while picked.len() < count {
        let obj = OBJECTS[(mix(&[&image.0, &k.to_le_bytes()]) % OBJECTS.len() as u64) as usize];
        if !picked.contains(&obj) {
            picked.push(obj);
        }
        k += 1;
    }
    let (last, rest) = picked.split_last().expect("at least three objects");
    let mut text = format!("This is a {style} showing a {} and a {last}.", rest.join(", a "));
    text.push_str(&format!(" The {} stands near the {}.", picked[0], picked[1]));
    if seed & 1 == 0 {
        text.push_str(" There are no visible people in the scene.");
    }
    text
}

fn template_summarize(description: &str, caption: &str) -> String {
    let lower = description.to_lowercase();
    let mut found: Vec<(usize, &str)> = OBJECTS.iter().filter_map(|o| lower.find(o).map(|pos| (pos, *o))).collect();
    found.sort();
    let mut lines: Vec<String> = found.into_iter().map(|(_, o)| o.to_string()).collect();
    let caption = caption.trim();
    if !caption.is_empty() && caption.split_whitespace().count() <= 5 {
        lines.push(caption.to_string());
    }
    lines.iter().enumerate().map(|(i, l)| format!("{}. {l}\n", i + 1)).collect()
}

fn template_decompose(phrases: &str) -> String {
    let mut out = String::new();
    for line in phrases.lines() {
        let phrase = line.trim().trim_start_matches(['-', '*']).trim();
        for word in phrase.split(|c: char| c.is_whitespace() || c == '-') {
            let w = word.to_lowercase();
            if !w.is_empty() && !STOPWORDS.contains(&w.as_str()) {
                out.push_str(&format!("- {w}\n"));
            }
        }
    }
    out
}

fn template_verify(req: &ChatRequest, digest: &Digest128) -> ChatResponse {
    let h = fnv1a64(&digest.0);
    let (r, s) = (unit(h), unit(h.rotate_left(29)));
    let (p_yes, p_no) = if r < 0.65 {
        let y = 0.80 + 0.19 * s;
        (y, (1.0 - y) * 0.6)
    } else if r < 0.85 {
        let n = 0.70 + 0.25 * s;
        ((1.0 - n) * 0.5, n)
    } else {
        (0.20, 0.15)
    };
    let rest = (1.0 - p_yes - p_no).max(1e-6);
    let mut alts: Vec<(String, f64)> = vec![
        ("Yes".into(), p_yes * 0.7),
        (" yes".into(), p_yes * 0.2),
        ("YES".into(), p_yes * 0.1),
        ("No".into(), p_no * 0.8),
        (" no".into(), p_no * 0.2),
    ];
    for (i, filler) in ["The", "It", "A", "Maybe", "I", "This", "There", "Sure"].iter().enumerate() {
        alts.push((filler.to_string(), rest * 0.5f64.powi(i as i32 + 1)));
    }
    alts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    alts.truncate(req.top_logprobs.unwrap_or(20).max(1) as usize);
    let alternatives: Vec<TokenAlternative> =
        alts.into_iter().map(|(token, p)| TokenAlternative { token, logprob: p.ln() }).collect();
    ChatResponse {
        content: alternatives[0].token.clone(),
        alternatives: req.logprobs.then_some(alternatives),
        finish_reason: Some("length".into()),
    }
}

pub fn template_detections(
    detector: &str,
    p: &Personality,
    image: &Digest128,
    width: u32,
    height: u32,
    categories: &[String],
    threshold: f64,
) -> Vec<RawDetection> {
    let (w, h) = (f64::from(width), f64::from(height));
    let mut out = Vec::new();
    for cat in categories {
        let object = mix(&[&image.0, cat.as_bytes()]);
        let hit = mix(&[detector.as_bytes(), &object.to_le_bytes()]);
        if unit(hit) >= p.recall {
            continue;
        }
        let u = |salt: u64| unit(mix(&[&object.to_le_bytes(), &salt.to_le_bytes()]));
        let v = |salt: u64| unit(mix(&[&hit.to_le_bytes(), &salt.to_le_bytes()]));
        let place = |offset: u64| {
            let bw = (0.08 + 0.4 * u(2 + offset)) * w;
            let bh = (0.08 + 0.4 * u(3 + offset)) * h;
            let cx = (0.15 + 0.7 * u(offset)) * w + (v(offset) - 0.5) * 2.0 * p.jitter * bw;
            let cy = (0.15 + 0.7 * u(1 + offset)) * h + (v(1 + offset) - 0.5) * 2.0 * p.jitter * bh;
            BBox::new(round2(cx - bw / 2.0), round2(cy - bh / 2.0), round2(cx + bw / 2.0), round2(cy + bh / 2.0))
                .clip(w, h)
        };
        let score = round2(p.score_min + (p.score_max - p.score_min) * v(7)).clamp(0.0, 1.0);
        if let Some(bbox) = place(0) {
            if score >= threshold {
                out.push(RawDetection { bbox, category: cat.clone(), score });
            }
        }
        if v(9) < p.extra_rate {
            let extra_score = round2(score * 0.8);
            if let Some(bbox) = place(10) {
                if extra_score >= threshold {
                    out.push(RawDetection { bbox, category: cat.clone(), score: extra_score });
                }
            }
        }
    }
    out
}
