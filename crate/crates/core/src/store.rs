//! Durable run storage at question-level resolution.
//!
//! Layout under the storage root:
//!
//! ```text
//! runs/<run_id>/run.json        run header, rewritten atomically on state change
//! runs/<run_id>/verdicts.jsonl  append-only, one {"task", "verdict"} object per line
//! index.json                    model_name -> latest completed run_id
//! ```
//!
//! One writer per run; readers go to disk and never take the writer's lock.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{aggregate_values, round2, QuestionVerdict, TaskScore, VerdictSink};

const HEADER_FILE: &str = "run.json";
const LOG_FILE: &str = "verdicts.jsonl";
const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run `{0}` already exists")]
    DuplicateRun(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{run_id}` is {status:?}, not running")]
    RunNotRunning { run_id: String, status: RunStatus },
    #[error("illegal status transition {from:?} -> {to:?} for run `{run_id}`")]
    BadTransition { run_id: String, from: RunStatus, to: RunStatus },
    #[error("unknown audit filter `{0}`")]
    BadFilter(String),
    #[error("storage failure at {path}: {reason}")]
    StorageFailure { path: PathBuf, reason: String },
}

impl StoreError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        StoreError::StorageFailure { path: path.to_path_buf(), reason: e.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Completed,
    Failed,
    Cancelled,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Completed | RunStatus::Failed | RunStatus::Cancelled)
    }

    fn can_become(self, next: RunStatus) -> bool {
        matches!(
            (self, next),
            (RunStatus::Pending, RunStatus::Running)
                | (RunStatus::Running, RunStatus::Completed | RunStatus::Failed | RunStatus::Cancelled)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Base,
    #[default]
    FineTuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub model_name: String,
    pub endpoint_url: String,
    pub model_kind: ModelKind,
    pub tasks: Vec<String>,
    pub k: usize,
    pub concurrency: usize,
    pub task_scores: BTreeMap<String, TaskScore>,
    pub average: Option<f64>,
    pub status: RunStatus,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub error: Option<String>,
    #[serde(default)]
    pub progress: BTreeMap<String, Progress>,
}

/// What a submitter provides; the store fills in identity and timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewRun {
    #[serde(default)]
    pub run_id: Option<String>,
    pub model_name: String,
    pub endpoint_url: String,
    #[serde(default)]
    pub model_kind: ModelKind,
    pub tasks: Vec<String>,
    pub k: usize,
    pub concurrency: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditFilter {
    All,
    Failed,
    Passed,
    NoValidResponse,
    Skipped,
}

impl std::str::FromStr for AuditFilter {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "" | "all" => AuditFilter::All,
            "failed" => AuditFilter::Failed,
            "passed" => AuditFilter::Passed,
            "no_valid_response" => AuditFilter::NoValidResponse,
            "skipped" => AuditFilter::Skipped,
            other => return Err(StoreError::BadFilter(other.to_string())),
        })
    }
}

impl AuditFilter {
    pub fn matches(self, v: &QuestionVerdict) -> bool {
        match self {
            AuditFilter::All => true,
            AuditFilter::Passed => v.correct,
            AuditFilter::Failed => !v.skipped && !v.correct,
            AuditFilter::NoValidResponse => v.no_valid_response,
            AuditFilter::Skipped => v.skipped,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AuditEntry {
    pub task: String,
    #[serde(flatten)]
    pub verdict: QuestionVerdict,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AuditPage {
    pub run_id: String,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<AuditEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LeaderboardRow {
    pub model_name: String,
    pub model_kind: ModelKind,
    pub average: Option<f64>,
    pub task_accuracies: BTreeMap<String, Option<f64>>,
    pub run_id: String,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RadarSeries {
    pub model_name: String,
    pub model_kind: ModelKind,
    /// Two-decimal accuracies keyed by task; absent tasks are gaps.
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Leaderboard {
    pub tasks: Vec<String>,
    pub rows: Vec<LeaderboardRow>,
    pub radar: Vec<RadarSeries>,
}

#[derive(Serialize, Deserialize)]
struct LogLine<'a> {
    task: std::borrow::Cow<'a, str>,
    verdict: std::borrow::Cow<'a, QuestionVerdict>,
}

struct RunEntry {
    header: RunRecord,
    log: Option<File>,
}

pub struct RunStore {
    root: PathBuf,
    runs: RwLock<HashMap<String, Arc<Mutex<RunEntry>>>>,
    index_lock: Mutex<()>,
}

impl std::fmt::Debug for RunStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunStore").field("root", &self.root).finish_non_exhaustive()
    }
}

impl RunStore {
    /// Opens (creating if needed) a store. Runs left pending or running by a
    /// previous process are marked failed; their verdicts stay auditable.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let runs_dir = root.join("runs");
        fs::create_dir_all(&runs_dir).map_err(|e| StoreError::io(&runs_dir, e))?;

        let mut runs = HashMap::new();
        for entry in fs::read_dir(&runs_dir).map_err(|e| StoreError::io(&runs_dir, e))? {
            let dir = entry.map_err(|e| StoreError::io(&runs_dir, e))?.path();
            let header_path = dir.join(HEADER_FILE);
            if !header_path.is_file() {
                continue;
            }
            let text = fs::read_to_string(&header_path).map_err(|e| StoreError::io(&header_path, e))?;
            let mut header: RunRecord = serde_json::from_str(&text).map_err(|e| StoreError::io(&header_path, e))?;
            if !header.status.is_terminal() {
                header.status = RunStatus::Failed;
                header.finished_at = Some(Utc::now());
                header.error = Some("interrupted: process stopped while the run was active".into());
                header.average = None;
                write_atomic(&header_path, &serde_json::to_vec_pretty(&header).expect("header serializes"))?;
            }
            runs.insert(header.run_id.clone(), Arc::new(Mutex::new(RunEntry { header, log: None })));
        }
        let store = Self { root, runs: RwLock::new(runs), index_lock: Mutex::new(()) };
        store.rebuild_index()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    fn entry(&self, run_id: &str) -> Result<Arc<Mutex<RunEntry>>, StoreError> {
        self.runs
            .read()
            .expect("store lock poisoned")
            .get(run_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownRun(run_id.to_string()))
    }

    /// Registers a pending run; the header is on disk before this returns.
    pub fn create_run(&self, job: NewRun) -> Result<RunRecord, StoreError> {
        let run_id = job.run_id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        if run_id.is_empty() || !run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(StoreError::StorageFailure {
                path: self.run_dir(&run_id),
                reason: "run id must be non-empty [A-Za-z0-9_-]".into(),
            });
        }
        let mut runs = self.runs.write().expect("store lock poisoned");
        let dir = self.run_dir(&run_id);
        if runs.contains_key(&run_id) || dir.exists() {
            return Err(StoreError::DuplicateRun(run_id));
        }
        fs::create_dir(&dir).map_err(|e| StoreError::io(&dir, e))?;
        let header = RunRecord {
            run_id: run_id.clone(),
            model_name: job.model_name,
            endpoint_url: job.endpoint_url,
            model_kind: job.model_kind,
            tasks: job.tasks,
            k: job.k,
            concurrency: job.concurrency,
            task_scores: BTreeMap::new(),
            average: None,
            status: RunStatus::Pending,
            created_at: Utc::now(),
            finished_at: None,
            error: None,
            progress: BTreeMap::new(),
        };
        let log_path = dir.join(LOG_FILE);
        File::create(&log_path).map_err(|e| StoreError::io(&log_path, e))?;
        write_atomic(&dir.join(HEADER_FILE), &serde_json::to_vec_pretty(&header).expect("header serializes"))?;
        runs.insert(run_id, Arc::new(Mutex::new(RunEntry { header: header.clone(), log: None })));
        Ok(header)
    }

    pub fn get_run(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        let entry = self.entry(run_id)?;
        let guard = entry.lock().expect("run lock poisoned");
        Ok(guard.header.clone())
    }

    /// All runs, newest first.
    pub fn list_runs(&self) -> Vec<RunRecord> {
        let entries: Vec<_> = self.runs.read().expect("store lock poisoned").values().cloned().collect();
        let mut out: Vec<RunRecord> = entries.iter().map(|e| e.lock().expect("run lock poisoned").header.clone()).collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.run_id.cmp(&b.run_id)));
        out
    }

    fn persist_header(&self, header: &RunRecord) -> Result<(), StoreError> {
        let path = self.run_dir(&header.run_id).join(HEADER_FILE);
        write_atomic(&path, &serde_json::to_vec_pretty(header).expect("header serializes"))
    }

    fn transition(&self, entry: &mut RunEntry, to: RunStatus) -> Result<(), StoreError> {
        let from = entry.header.status;
        if !from.can_become(to) {
            return Err(StoreError::BadTransition { run_id: entry.header.run_id.clone(), from, to });
        }
        entry.header.status = to;
        Ok(())
    }

    pub fn mark_running(&self, run_id: &str) -> Result<(), StoreError> {
        let entry = self.entry(run_id)?;
        let mut e = entry.lock().expect("run lock poisoned");
        self.transition(&mut e, RunStatus::Running)?;
        let path = self.run_dir(run_id).join(LOG_FILE);
        let file = OpenOptions::new().append(true).create(true).open(&path).map_err(|err| StoreError::io(&path, err))?;
        e.log = Some(file);
        self.persist_header(&e.header)
    }

    pub fn task_started(&self, run_id: &str, task: &str, total: usize) -> Result<(), StoreError> {
        let entry = self.entry(run_id)?;
        let mut e = entry.lock().expect("run lock poisoned");
        require_running(&e.header)?;
        e.header.progress.insert(task.to_string(), Progress { done: 0, total });
        self.persist_header(&e.header)
    }

    /// Appends one verdict and syncs it to disk before returning.
    pub fn append_verdict(&self, run_id: &str, task: &str, verdict: &QuestionVerdict) -> Result<(), StoreError> {
        let entry = self.entry(run_id)?;
        let mut e = entry.lock().expect("run lock poisoned");
        require_running(&e.header)?;
        let path = self.run_dir(run_id).join(LOG_FILE);
        let mut line = serde_json::to_vec(&LogLine {
            task: std::borrow::Cow::Borrowed(task),
            verdict: std::borrow::Cow::Borrowed(verdict),
        })
        .expect("verdict serializes");
        line.push(b'\n');
        let file = e.log.as_mut().ok_or_else(|| StoreError::io(&path, "log not open"))?;
        file.write_all(&line).map_err(|err| StoreError::io(&path, err))?;
        file.sync_data().map_err(|err| StoreError::io(&path, err))?;
        e.header.progress.entry(task.to_string()).or_default().done += 1;
        Ok(())
    }

    pub fn set_task_score(&self, run_id: &str, score: &TaskScore) -> Result<(), StoreError> {
        let entry = self.entry(run_id)?;
        let mut e = entry.lock().expect("run lock poisoned");
        require_running(&e.header)?;
        e.header.task_scores.insert(score.task.clone(), score.clone());
        self.persist_header(&e.header)
    }

    /// Moves a running run to a terminal status. `average` is only kept for
    /// completed runs whose task scores are all defined.
    pub fn finish(
        &self,
        run_id: &str,
        status: RunStatus,
        average: Option<f64>,
        error: Option<String>,
    ) -> Result<(), StoreError> {
        let entry = self.entry(run_id)?;
        let header = {
            let mut e = entry.lock().expect("run lock poisoned");
            self.transition(&mut e, status)?;
            let all_defined = !e.header.task_scores.is_empty()
                && e.header.tasks.iter().all(|t| e.header.task_scores.get(t).is_some_and(|s| s.accuracy.is_some()));
            e.header.average = if status == RunStatus::Completed && all_defined { average } else { None };
            e.header.error = error;
            e.header.finished_at = Some(Utc::now());
            e.log = None;
            self.persist_header(&e.header)?;
            e.header.clone()
        };
        if header.status == RunStatus::Completed {
            self.rebuild_index()?;
        }
        Ok(())
    }

    /// Every verdict persisted for a run, in log order. A torn final line
    /// (crash mid-write) is ignored; it was never acknowledged.
    pub fn verdicts(&self, run_id: &str) -> Result<Vec<AuditEntry>, StoreError> {
        self.entry(run_id)?;
        let path = self.run_dir(run_id).join(LOG_FILE);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::io(&path, e)),
        };
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| StoreError::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<LogLine<'static>>(&line) {
                Ok(l) => out.push(AuditEntry { task: l.task.into_owned(), verdict: l.verdict.into_owned() }),
                Err(e) => tracing::warn!(run = run_id, error = %e, "skipping unreadable verdict line"),
            }
        }
        Ok(out)
    }

    pub fn query_audit(
        &self,
        run_id: &str,
        task: Option<&str>,
        filter: AuditFilter,
        offset: usize,
        limit: usize,
    ) -> Result<AuditPage, StoreError> {
        let mut matching: Vec<AuditEntry> = self
            .verdicts(run_id)?
            .into_iter()
            .filter(|e| task.is_none_or(|t| e.task == t) && filter.matches(&e.verdict))
            .collect();
        matching.sort_by(|a, b| a.task.cmp(&b.task).then_with(|| a.verdict.record_id.cmp(&b.verdict.record_id)));
        let total = matching.len();
        let items = matching.into_iter().skip(offset).take(limit).collect();
        Ok(AuditPage { run_id: run_id.to_string(), total, offset, limit, items })
    }

    /// Task scores recomputed from the verdict log.
    pub fn recompute_scores(&self, run_id: &str) -> Result<BTreeMap<String, TaskScore>, StoreError> {
        let header = self.get_run(run_id)?;
        let mut by_task: BTreeMap<String, Vec<QuestionVerdict>> = BTreeMap::new();
        for e in self.verdicts(run_id)? {
            by_task.entry(e.task).or_default().push(e.verdict);
        }
        Ok(by_task
            .into_iter()
            .map(|(task, vs)| {
                let complete = header.task_scores.get(&task).map(|s| s.complete).unwrap_or(false);
                let score = TaskScore::from_verdicts(&task, &vs, complete);
                (task, score)
            })
            .collect())
    }

    /// Latest completed run per model, highest average first.
    pub fn query_leaderboard(&self) -> Leaderboard {
        let mut latest: BTreeMap<String, RunRecord> = BTreeMap::new();
        for run in self.list_runs().into_iter().filter(|r| r.status == RunStatus::Completed) {
            let newer = match latest.get(&run.model_name) {
                None => true,
                Some(cur) => recency_key(&run) > recency_key(cur),
            };
            if newer {
                latest.insert(run.model_name.clone(), run);
            }
        }
        let mut rows: Vec<LeaderboardRow> = latest
            .into_values()
            .map(|r| LeaderboardRow {
                task_accuracies: r.task_scores.iter().map(|(t, s)| (t.clone(), s.accuracy.map(round2))).collect(),
                model_name: r.model_name,
                model_kind: r.model_kind,
                average: r.average,
                run_id: r.run_id,
                finished_at: r.finished_at,
            })
            .collect();
        rows.sort_by(|a, b| {
            let (x, y) = (a.average.unwrap_or(f64::NEG_INFINITY), b.average.unwrap_or(f64::NEG_INFINITY));
            y.total_cmp(&x).then_with(|| a.model_name.cmp(&b.model_name))
        });
        let tasks: BTreeSet<String> = rows.iter().flat_map(|r| r.task_accuracies.keys().cloned()).collect();
        let radar = rows
            .iter()
            .map(|r| RadarSeries {
                model_name: r.model_name.clone(),
                model_kind: r.model_kind,
                values: r.task_accuracies.iter().filter_map(|(t, a)| a.map(|a| (t.clone(), a))).collect(),
            })
            .collect();
        Leaderboard { tasks: tasks.into_iter().collect(), rows, radar }
    }

    fn rebuild_index(&self) -> Result<(), StoreError> {
        let _guard = self.index_lock.lock().expect("index lock poisoned");
        let index: BTreeMap<String, String> =
            self.query_leaderboard().rows.into_iter().map(|r| (r.model_name, r.run_id)).collect();
        write_atomic(&self.root.join(INDEX_FILE), &serde_json::to_vec_pretty(&index).expect("index serializes"))
    }

    /// Model name to latest completed run id, as persisted.
    pub fn read_index(&self) -> Result<BTreeMap<String, String>, StoreError> {
        let path = self.root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| StoreError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::io(&path, e))
    }

    /// Verifies the root is writable.
    pub fn health(&self) -> Result<(), StoreError> {
        let probe = self.root.join(".health");
        fs::write(&probe, b"ok").map_err(|e| StoreError::io(&probe, e))?;
        fs::remove_file(&probe).map_err(|e| StoreError::io(&probe, e))
    }

    pub fn sink(&self, run_id: &str) -> RunSink<'_> {
        RunSink { store: self, run_id: run_id.to_string() }
    }
}

/// Sorting key for "most recent completed run".
fn recency_key(r: &RunRecord) -> (Option<DateTime<Utc>>, DateTime<Utc>, String) {
    (r.finished_at, r.created_at, r.run_id.clone())
}

fn require_running(h: &RunRecord) -> Result<(), StoreError> {
    if h.status != RunStatus::Running {
        return Err(StoreError::RunNotRunning { run_id: h.run_id.clone(), status: h.status });
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
    f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
}

/// Routes evaluator output into one run of a store.
pub struct RunSink<'a> {
    store: &'a RunStore,
    run_id: String,
}

impl VerdictSink for RunSink<'_> {
    fn task_started(&self, task: &str, total: usize) -> Result<(), StoreError> {
        self.store.task_started(&self.run_id, task, total)
    }

    fn record(&self, task: &str, verdict: &QuestionVerdict) -> Result<(), StoreError> {
        self.store.append_verdict(&self.run_id, task, verdict)
    }
}

/// Unweighted mean of stored task accuracies, same arithmetic as the evaluator.
pub fn average_of(scores: &BTreeMap<String, TaskScore>) -> Option<f64> {
    let values: Option<Vec<f64>> = scores.values().map(|s| s.accuracy).collect();
    aggregate_values(&values?)
}
