//! HTTP gateway: evaluation runs, audit and leaderboard queries, and
//! multi-model chat sessions, all under `/api`.

pub mod chat;
pub mod cli;
pub mod error;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use proctor_core::client::EndpointConfig;
use proctor_core::evaluator::{CancelFlag, DataRoot, EvalJob, Evaluator, DEFAULT_K};
use proctor_core::store::{AuditFilter, AuditPage, Leaderboard, ModelKind, NewRun, RunRecord, RunStore};
use proctor_core::taskdef::TaskCatalog;
use serde::Deserialize;
use serde_json::json;

pub use error::{ApiError, ErrorCode};

pub const MAX_CONCURRENCY: usize = 256;
pub const MAX_AUDIT_PAGE: usize = 1000;

pub struct AppState {
    pub store: Arc<RunStore>,
    pub catalog: Arc<TaskCatalog>,
    pub data_root: PathBuf,
    pub evaluator: Evaluator,
    pub default_k: usize,
    active: Mutex<HashMap<String, CancelFlag>>,
    chats: chat::Sessions,
}

impl AppState {
    pub fn new(store: RunStore, catalog: TaskCatalog, data_root: PathBuf) -> Self {
        Self {
            store: Arc::new(store),
            catalog: Arc::new(catalog),
            data_root,
            evaluator: Evaluator::default(),
            default_k: DEFAULT_K,
            active: Mutex::new(HashMap::new()),
            chats: chat::Sessions::default(),
        }
    }

    pub fn with_default_k(mut self, k: usize) -> Self {
        self.default_k = k;
        self
    }

    /// Cancels every run this process started.
    pub fn cancel_all(&self) {
        for flag in self.active.lock().expect("active runs poisoned").values() {
            flag.cancel();
        }
    }
}

/// A bare URL or a full endpoint object.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EndpointSpec {
    Url(String),
    Full(EndpointConfig),
}

impl EndpointSpec {
    pub fn resolve(self, model_name: &str) -> EndpointConfig {
        let mut ep = match self {
            EndpointSpec::Url(u) => EndpointConfig::new(u, model_name),
            EndpointSpec::Full(ep) => ep,
        };
        if ep.model_name.is_empty() {
            ep.model_name = model_name.to_string();
        }
        ep
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SubmitRun {
    #[serde(default)]
    pub run_id: Option<String>,
    pub model_name: String,
    pub endpoint: EndpointSpec,
    #[serde(default)]
    pub model_kind: ModelKind,
    pub tasks: Vec<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub concurrency: Option<usize>,
}

/// Checks a submission against the catalog and builds the job the evaluator
/// runs. The CLI and the API both go through here.
pub fn build_job(
    catalog: &TaskCatalog,
    run_id: &str,
    endpoint: EndpointConfig,
    task_names: &[String],
    k: usize,
    concurrency: usize,
) -> Result<EvalJob, ApiError> {
    if task_names.is_empty() {
        return Err(ApiError::invalid("tasks must not be empty"));
    }
    if concurrency > MAX_CONCURRENCY {
        return Err(ApiError::invalid(format!("concurrency must be at most {MAX_CONCURRENCY}")));
    }
    let tasks = task_names
        .iter()
        .map(|n| catalog.get(n).cloned().ok_or_else(|| ApiError::new(ErrorCode::UnknownTask, format!("unknown task `{n}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    EvalJob::new(run_id, endpoint, tasks)
        .and_then(|j| j.with_k(k))
        .and_then(|j| j.with_concurrency(concurrency))
        .map_err(|e| ApiError::invalid(e.to_string()))
}

/// Registers the run and starts it in the background.
pub fn start_run(state: &Arc<AppState>, req: SubmitRun) -> Result<RunRecord, ApiError> {
    if req.model_name.trim().is_empty() {
        return Err(ApiError::invalid("model_name must not be empty"));
    }
    let endpoint = req.endpoint.resolve(&req.model_name);
    let k = req.k.unwrap_or(state.default_k);
    let concurrency = req.concurrency.unwrap_or(8);
    // validate fully before anything is persisted
    build_job(&state.catalog, "pending", endpoint.clone(), &req.tasks, k, concurrency)?;

    let run = state.store.create_run(NewRun {
        run_id: req.run_id,
        model_name: req.model_name,
        endpoint_url: endpoint.base_url.clone(),
        model_kind: req.model_kind,
        tasks: req.tasks.clone(),
        k,
        concurrency,
    })?;
    let job = build_job(&state.catalog, &run.run_id, endpoint, &req.tasks, k, concurrency)?;
    let cancel = CancelFlag::new();
    state.active.lock().expect("active runs poisoned").insert(run.run_id.clone(), cancel.clone());

    let st = state.clone();
    tokio::spawn(async move {
        let run_id = job.run_id.clone();
        let result = st.evaluator.evaluate_run(&job, &st.store, &DataRoot(st.data_root.clone()), &cancel).await;
        if let Err(e) = result {
            tracing::error!(run = %run_id, error = %e, "run aborted");
            // the run may still be pending if it failed before starting
            let _ = st.store.mark_running(&run_id);
            let _ = st.store.finish(&run_id, proctor_core::store::RunStatus::Failed, None, Some(e.to_string()));
        }
        st.active.lock().expect("active runs poisoned").remove(&run_id);
    });
    Ok(run)
}

async fn submit_run(
    State(state): State<Arc<AppState>>,
    body: Result<Json<SubmitRun>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let run = start_run(&state, req)?;
    Ok((StatusCode::ACCEPTED, Json(run)))
}

async fn list_runs(State(state): State<Arc<AppState>>) -> Json<Vec<RunRecord>> {
    Json(state.store.list_runs())
}

async fn get_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<RunRecord>, ApiError> {
    Ok(Json(state.store.get_run(&id)?))
}

async fn cancel_run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<RunRecord>, ApiError> {
    let run = state.store.get_run(&id)?;
    if run.status.is_terminal() {
        return Err(ApiError::new(ErrorCode::RunNotActive, format!("run `{id}` is already {:?}", run.status).to_lowercase()));
    }
    match state.active.lock().expect("active runs poisoned").get(&id) {
        Some(flag) => flag.cancel(),
        None => return Err(ApiError::new(ErrorCode::RunNotActive, format!("run `{id}` is not executing in this process"))),
    }
    Ok(Json(state.store.get_run(&id)?))
}

#[derive(Debug, Deserialize)]
struct AuditParams {
    task: Option<String>,
    filter: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn audit(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    params: Result<Query<AuditParams>, axum::extract::rejection::QueryRejection>,
) -> Result<Json<AuditPage>, ApiError> {
    let Query(p) = params.map_err(|e| ApiError::invalid(e.body_text()))?;
    let filter: AuditFilter = p.filter.as_deref().unwrap_or("all").parse()?;
    let limit = p.limit.unwrap_or(50).min(MAX_AUDIT_PAGE);
    Ok(Json(state.store.query_audit(&id, p.task.as_deref().filter(|t| !t.is_empty()), filter, p.offset.unwrap_or(0), limit)?))
}

async fn leaderboard(State(state): State<Arc<AppState>>) -> Json<Leaderboard> {
    Json(state.store.query_leaderboard())
}

async fn list_tasks(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let tasks: Vec<_> = state
        .catalog
        .iter()
        .map(|t| {
            json!({
                "task": t.task,
                "dataset_path": t.dataset_path,
                "choices": t.doc_to_choice,
                "num_fewshot": t.fewshot.num_fewshot,
            })
        })
        .collect();
    Json(json!({ "tasks": tasks }))
}

async fn health(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let storage = state.store.health();
    let body = json!({
        "status": if storage.is_ok() { "ok" } else { "degraded" },
        "storage": { "ok": storage.is_ok(), "detail": storage.err().map(|e| e.to_string()) },
        "tasks": state.catalog.len(),
        "active_runs": state.active.lock().expect("active runs poisoned").len(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let code = if body["storage"]["ok"] == true { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (code, Json(body))
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("route")
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/runs", post(submit_run).get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/cancel", post(cancel_run))
        .route("/api/runs/{id}/audit", get(audit))
        .route("/api/leaderboard", get(leaderboard))
        .route("/api/tasks", get(list_tasks))
        .route("/api/health", get(health))
        .merge(chat::routes())
        .route("/api/{*rest}", axum::routing::any(api_not_found))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug)]
pub enum ServeError {
    AddrInUse(String),
    Bind(String),
    Io(String),
}

impl ServeError {
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::AddrInUse(_) => "addr_in_use",
            ServeError::Bind(_) => "bind_failed",
            ServeError::Io(_) => "io_error",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            ServeError::AddrInUse(m) | ServeError::Bind(m) | ServeError::Io(m) => m,
        }
    }
}

pub async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServeError> {
    tokio::net::TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServeError::AddrInUse(format!("{addr}: {e}")),
        _ => ServeError::Bind(format!("{addr}: {e}")),
    })
}

/// Serves until `shutdown` resolves, then cancels the runs still executing.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    static_dir: Option<PathBuf>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServeError> {
    let app = router(state.clone(), static_dir);
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    state.cancel_all();
    result.map_err(|e| ServeError::Io(e.to_string()))
}
