#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proctor_core::store::RunStore;
use proctor_core::taskdef::TaskCatalog;
use proctor_gateway::AppState;
use proctor_mock::fixture::ScriptedTask;
use serde_json::{json, Value};
use tokio::sync::oneshot;

/// Writes the tasks under `<dir>/tasks` and `<dir>/data`.
pub fn write_fixture(dir: &Path, tasks: &[&ScriptedTask]) -> (PathBuf, PathBuf) {
    let (t, d) = (dir.join("tasks"), dir.join("data"));
    for task in tasks {
        task.write_to(&t, &d).unwrap();
    }
    (t, d)
}

pub struct Gateway {
    pub url: String,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<tokio::task::JoinHandle<()>>,
}

impl Gateway {
    pub async fn start(store: &Path, tasks: &Path, data: &Path) -> Self {
        let catalog = TaskCatalog::load_dir(tasks).unwrap();
        let state = Arc::new(AppState::new(RunStore::open(store).unwrap(), catalog, data.to_path_buf()));
        let listener = proctor_gateway::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        let st = state.clone();
        let handle = tokio::spawn(async move {
            proctor_gateway::serve(listener, st, None, async {
                let _ = rx.await;
            })
            .await
            .unwrap();
        });
        Self { url, state, stop: Some(tx), handle: Some(handle) }
    }

    pub fn api(&self, path: &str) -> String {
        format!("{}/api{}", self.url, path)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.await;
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

/// Endpoint object with a short backoff so retry paths stay fast.
pub fn endpoint_json(base_url: &str, model: &str) -> Value {
    json!({ "base_url": base_url, "model_name": model, "backoff_base": 1, "max_retries": 1 })
}

pub async fn submit(http: &reqwest::Client, gw: &Gateway, body: Value) -> (u16, Value) {
    let resp = http.post(gw.api("/runs")).json(&body).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

pub async fn get_json(http: &reqwest::Client, url: &str) -> (u16, Value) {
    let resp = http.get(url).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap_or(Value::Null))
}

/// Polls until the run leaves pending/running.
pub async fn wait_terminal(http: &reqwest::Client, gw: &Gateway, run_id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(60);
    loop {
        let (_, run) = get_json(http, &gw.api(&format!("/runs/{run_id}"))).await;
        let status = run["status"].as_str().unwrap_or_default().to_string();
        if !matches!(status.as_str(), "pending" | "running") {
            return run;
        }
        assert!(Instant::now() < deadline, "run {run_id} still {status}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Every page of the audit view for one filter, concatenated.
pub async fn audit_all(http: &reqwest::Client, gw: &Gateway, run_id: &str, filter: &str) -> Vec<Value> {
    let mut out = Vec::new();
    let mut offset = 0;
    loop {
        let url = gw.api(&format!("/runs/{run_id}/audit?filter={filter}&offset={offset}&limit=25"));
        let (status, page) = get_json(http, &url).await;
        assert_eq!(status, 200, "{page}");
        let items = page["items"].as_array().unwrap().clone();
        if items.is_empty() {
            break;
        }
        offset += items.len();
        out.extend(items);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseEvent {
    pub event: String,
    pub data: Value,
}

/// Parses a complete `text/event-stream` body.
pub fn parse_sse(body: &str) -> Vec<SseEvent> {
    let mut out = Vec::new();
    for block in body.replace("\r\n", "\n").split("\n\n") {
        let mut event = String::from("message");
        let mut data = Vec::new();
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("event:") {
                event = v.trim().to_string();
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push(v.strip_prefix(' ').unwrap_or(v).to_string());
            }
        }
        if !data.is_empty() {
            out.push(SseEvent { event, data: serde_json::from_str(&data.join("\n")).unwrap_or(Value::Null) });
        }
    }
    out
}

/// Sends one chat turn and reads the whole event stream.
pub async fn chat_turn(http: &reqwest::Client, gw: &Gateway, session: &str, content: &str) -> (u16, Vec<SseEvent>, String) {
    let resp = http
        .post(gw.api(&format!("/chat/sessions/{session}/messages")))
        .json(&json!({ "content": content }))
        .send()
        .await
        .unwrap();
    let status = resp.status().as_u16();
    let body = resp.text().await.unwrap();
    (status, parse_sse(&body), body)
}

/// Runs the `proctor` binary off the async runtime.
pub async fn proctor(args: Vec<String>, envs: Vec<(String, String)>) -> std::process::Output {
    tokio::task::spawn_blocking(move || {
        let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_proctor"));
        cmd.args(&args);
        for (k, v) in envs {
            cmd.env(k, v);
        }
        cmd.env_remove("PROCTOR_API_KEY").output().unwrap()
    })
    .await
    .unwrap()
}

pub fn s(v: &str) -> String {
    v.to_string()
}
