//! A small deterministic stand-in for an OpenAI-compatible inference server.
//!
//! Completions return scripted top-k distributions keyed by a `qid:<id>`
//! marker in the prompt (the last marker wins, so few-shot examples do not
//! interfere). Prompts without a script get a distribution derived from a
//! hash of the prompt text. Chat replies echo, return fixed text, or call a
//! closure. Every request is counted and recorded.

pub mod fixture;

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use futures::StreamExt;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub use proctor_core::client::ChatMessage;

pub const MARKER: &str = "qid:";

/// (token, logprob) pairs in the order the server reports them.
pub type Script = Vec<(String, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogprobMode {
    /// Completions route returns top-k logprobs.
    #[default]
    Full,
    /// Completions succeed but carry no logprobs at all.
    Missing,
    /// No completions route (404); chat supports `top_logprobs`.
    ChatOnly,
}

pub type ReplyFn = Arc<dyn Fn(&[ChatMessage]) -> String + Send + Sync>;

#[derive(Clone, Default)]
pub enum ChatMode {
    /// `echo: <last user message>`
    #[default]
    Echo,
    Fixed(String),
    Func(ReplyFn),
}

impl std::fmt::Debug for ChatMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChatMode::Echo => f.write_str("Echo"),
            ChatMode::Fixed(s) => f.debug_tuple("Fixed").field(s).finish(),
            ChatMode::Func(_) => f.write_str("Func(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub scripts: HashMap<String, Script>,
    /// Labels used for unscripted prompts.
    pub fallback_labels: Vec<String>,
    pub logprobs: LogprobMode,
    pub chat: ChatMode,
    /// The first N requests (any route) answer 503.
    pub fail_first: usize,
    /// Every request answers with this status.
    pub always_status: Option<u16>,
    /// Sleep before answering each request.
    pub latency: Duration,
    /// Gap between streamed fragments.
    pub stream_delay: Duration,
    /// Streams stop after this many fragments without a terminator.
    pub cut_stream_after: Option<usize>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            scripts: HashMap::new(),
            fallback_labels: ["A", "B", "C", "D"].map(String::from).to_vec(),
            logprobs: LogprobMode::Full,
            chat: ChatMode::Echo,
            fail_first: 0,
            always_status: None,
            latency: Duration::ZERO,
            stream_delay: Duration::ZERO,
            cut_stream_after: None,
        }
    }
}

impl MockConfig {
    pub fn with_scripts(mut self, scripts: HashMap<String, Script>) -> Self {
        self.scripts = scripts;
        self
    }

    pub fn with_chat(mut self, chat: ChatMode) -> Self {
        self.chat = chat;
        self
    }

    pub fn fixed_reply(text: impl Into<String>) -> Self {
        Self::default().with_chat(ChatMode::Fixed(text.into()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub route: &'static str,
    pub body: Value,
}

#[derive(Debug, Default)]
pub struct Stats {
    pub completions: AtomicUsize,
    pub chat: AtomicUsize,
    pub failed: AtomicUsize,
    log: Mutex<Vec<RecordedRequest>>,
}

impl Stats {
    pub fn completions(&self) -> usize {
        self.completions.load(Ordering::SeqCst)
    }

    pub fn chat(&self) -> usize {
        self.chat.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.completions() + self.chat()
    }

    /// Requests answered with an injected error.
    pub fn failed(&self) -> usize {
        self.failed.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("log poisoned").clone()
    }
}

struct Shared {
    cfg: MockConfig,
    stats: Arc<Stats>,
    seen: AtomicUsize,
}

pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<Stats>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockServer {
    /// Binds an ephemeral localhost port.
    pub async fn start(cfg: MockConfig) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0".parse().expect("static addr"), cfg).await
    }

    pub async fn bind(addr: SocketAddr, cfg: MockConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(Stats::default());
        let shared = Arc::new(Shared { cfg, stats: stats.clone(), seen: AtomicUsize::new(0) });
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let server = axum::serve(listener, router(shared)).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            let _ = server.await;
        });
        Ok(Self { addr, stats, shutdown: Some(tx) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `http://127.0.0.1:<port>`; the client adds `/v1`.
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    /// Blocks until the server has been asked to stop.
    pub async fn run_until_ctrl_c(mut self) {
        let _ = tokio::signal::ctrl_c().await;
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub fn router_for(cfg: MockConfig) -> (Router, Arc<Stats>) {
    let stats = Arc::new(Stats::default());
    let shared = Arc::new(Shared { cfg, stats: stats.clone(), seen: AtomicUsize::new(0) });
    (router(shared), stats)
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/chat/completions", post(chat))
        .with_state(shared)
}

/// Id after the last `qid:` marker, up to the next whitespace.
pub fn marker_id(prompt: &str) -> Option<&str> {
    let at = prompt.rfind(MARKER)? + MARKER.len();
    let rest = &prompt[at..];
    let id = rest.split(char::is_whitespace).next().unwrap_or_default();
    (!id.is_empty()).then_some(id)
}

/// Distribution for prompts with no script: a hash of the prompt picks the
/// modal label; the rest of the labels and a filler token follow.
pub fn hashed_distribution(prompt: &str, labels: &[String]) -> Script {
    let digest = Sha256::digest(prompt.as_bytes());
    let pick = digest[0] as usize % labels.len().max(1);
    let mut out = Vec::new();
    let mut lp = -0.25;
    for i in 0..labels.len() {
        let label = &labels[(pick + i) % labels.len()];
        out.push((format!(" {label}"), lp));
        lp -= 1.5;
    }
    out.push(("The".to_string(), lp));
    out
}

fn error(status: StatusCode, msg: &str) -> Response {
    (status, Json(json!({"error": {"message": msg, "type": "mock_error"}}))).into_response()
}

async fn gate(shared: &Shared, route: &'static str, body: &Value) -> Option<Response> {
    match route {
        "completions" => shared.stats.completions.fetch_add(1, Ordering::SeqCst),
        _ => shared.stats.chat.fetch_add(1, Ordering::SeqCst),
    };
    shared.stats.log.lock().expect("log poisoned").push(RecordedRequest { route, body: body.clone() });
    if !shared.cfg.latency.is_zero() {
        tokio::time::sleep(shared.cfg.latency).await;
    }
    let n = shared.seen.fetch_add(1, Ordering::SeqCst);
    if let Some(code) = shared.cfg.always_status {
        shared.stats.failed.fetch_add(1, Ordering::SeqCst);
        let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        return Some(error(status, "injected failure"));
    }
    if n < shared.cfg.fail_first {
        shared.stats.failed.fetch_add(1, Ordering::SeqCst);
        return Some(error(StatusCode::SERVICE_UNAVAILABLE, "injected transient failure"));
    }
    None
}

fn distribution(shared: &Shared, prompt: &str, k: usize) -> Script {
    let mut d = marker_id(prompt)
        .and_then(|id| shared.cfg.scripts.get(id).cloned())
        .unwrap_or_else(|| hashed_distribution(prompt, &shared.cfg.fallback_labels));
    d.truncate(k.max(1));
    d
}

async fn completions(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    if shared.cfg.logprobs == LogprobMode::ChatOnly {
        // not counted: the route does not exist on this server
        return error(StatusCode::NOT_FOUND, "no completions route");
    }
    if let Some(r) = gate(&shared, "completions", &body).await {
        return r;
    }
    let prompt = body.get("prompt").and_then(Value::as_str).unwrap_or_default();
    let k = body.get("logprobs").and_then(Value::as_u64).unwrap_or(0) as usize;
    let d = distribution(&shared, prompt, k);
    let text = d.first().map(|(t, _)| t.clone()).unwrap_or_default();
    let logprobs = if shared.cfg.logprobs == LogprobMode::Missing || k == 0 {
        Value::Null
    } else {
        let top: serde_json::Map<String, Value> = d.iter().map(|(t, lp)| (t.clone(), json!(lp))).collect();
        json!({ "tokens": [text], "token_logprobs": [d[0].1], "top_logprobs": [top] })
    };
    Json(json!({
        "id": "cmpl-mock",
        "object": "text_completion",
        "model": body.get("model").cloned().unwrap_or(Value::Null),
        "choices": [{ "index": 0, "text": text, "logprobs": logprobs, "finish_reason": "length" }],
    }))
    .into_response()
}

fn reply_for(shared: &Shared, messages: &[ChatMessage]) -> String {
    match &shared.cfg.chat {
        ChatMode::Echo => {
            let last = messages.iter().rev().find(|m| m.role == proctor_core::client::Role::User);
            format!("echo: {}", last.map(|m| m.content.as_str()).unwrap_or_default())
        }
        ChatMode::Fixed(s) => s.clone(),
        ChatMode::Func(f) => f(messages),
    }
}

async fn chat(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    if let Some(r) = gate(&shared, "chat", &body).await {
        return r;
    }
    let messages: Vec<ChatMessage> = match serde_json::from_value(body.get("messages").cloned().unwrap_or(Value::Null)) {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, &format!("bad messages: {e}")),
    };
    let model = body.get("model").cloned().unwrap_or(Value::Null);

    if body.get("logprobs").and_then(Value::as_bool) == Some(true) {
        let k = body.get("top_logprobs").and_then(Value::as_u64).unwrap_or(0) as usize;
        let prompt = messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        let d = distribution(&shared, prompt, k);
        let top: Vec<Value> = d.iter().map(|(t, lp)| json!({"token": t, "logprob": lp})).collect();
        let text = d.first().map(|(t, _)| t.clone()).unwrap_or_default();
        let logprobs = if shared.cfg.logprobs == LogprobMode::Missing {
            Value::Null
        } else {
            json!({ "content": [{ "token": text, "logprob": d[0].1, "top_logprobs": top }] })
        };
        return Json(json!({
            "id": "chatcmpl-mock",
            "object": "chat.completion",
            "model": model,
            "choices": [{ "index": 0, "message": {"role": "assistant", "content": text}, "logprobs": logprobs, "finish_reason": "length" }],
        }))
        .into_response();
    }

    let reply = reply_for(&shared, &messages);
    if body.get("stream").and_then(Value::as_bool) == Some(true) {
        return stream_reply(&shared.cfg, model, reply);
    }
    Json(json!({
        "id": "chatcmpl-mock",
        "object": "chat.completion",
        "model": model,
        "choices": [{ "index": 0, "message": {"role": "assistant", "content": reply}, "finish_reason": "stop" }],
    }))
    .into_response()
}

/// Splits after each space so fragments concatenate back to the reply.
pub fn fragments(reply: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in reply.chars() {
        cur.push(c);
        if c == ' ' {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn stream_reply(cfg: &MockConfig, model: Value, reply: String) -> Response {
    let mut events: Vec<String> = fragments(&reply)
        .into_iter()
        .map(|f| {
            let chunk = json!({
                "id": "chatcmpl-mock",
                "object": "chat.completion.chunk",
                "model": model,
                "choices": [{ "index": 0, "delta": {"content": f}, "finish_reason": null }],
            });
            format!("data: {chunk}\n\n")
        })
        .collect();
    match cfg.cut_stream_after {
        Some(n) => events.truncate(n),
        None => events.push("data: [DONE]\n\n".to_string()),
    }
    let delay = cfg.stream_delay;
    let body = futures::stream::iter(events).then(move |e| async move {
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        Ok::<_, Infallible>(Bytes::from(e))
    });
    Response::builder()
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(body))
        .expect("static response parts")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_marker_wins() {
        assert_eq!(marker_id("qid:a1 shot\n\nqid:b2 test"), Some("b2"));
        assert_eq!(marker_id("no marker"), None);
        assert_eq!(marker_id("qid: gap"), None);
    }

    #[test]
    fn hashed_distribution_is_stable() {
        let labels: Vec<String> = ["A", "B"].map(String::from).to_vec();
        assert_eq!(hashed_distribution("x", &labels), hashed_distribution("x", &labels));
        assert_eq!(hashed_distribution("x", &labels).len(), 3);
    }

    #[test]
    fn fragments_reassemble() {
        let s = "the quick  brown fox";
        assert_eq!(fragments(s).concat(), s);
        assert!(fragments("").is_empty());
    }
}
