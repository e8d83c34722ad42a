//! Administering tasks to a model and scoring the answers.
//!
//! One completion request per question: the top-k next-token distribution is
//! fetched once and handed to the configured [`AnswerExtractor`]. Questions
//! within a task run concurrently up to the job's limit; tasks run in order.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ClientError, EndpointConfig, InferenceClient, TokenCandidate};
use crate::dataset::{self, Dataset, DatasetError, Record};
use crate::extract::{AnswerExtractor, ExtractorRegistry, DEFAULT_EXTRACTOR};
use crate::store::{RunRecord, RunStatus, RunStore, StoreError};
use crate::taskdef::{build_prompt_instance, PromptInstance, SamplerRegistry, TaskConfig, TaskError};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("endpoint does not report token alternatives: {0}")]
    NoLogprobs(String),
    #[error("unknown answer extractor `{0}`")]
    UnknownExtractor(String),
    #[error("unknown few-shot sampler `{0}`")]
    UnknownSampler(String),
    #[error("task `{task}`: {source}")]
    Dataset { task: String, source: DatasetError },
    #[error("task `{task}`: {source}")]
    Task { task: String, source: TaskError },
    #[error("run store: {0}")]
    Store(#[from] StoreError),
    #[error("task `{}` cancelled after {} verdicts", .partial.score.task, .partial.verdicts.len())]
    Aborted { partial: Box<TaskOutcome> },
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::InvalidJob(_) => "invalid_job",
            EvalError::NoLogprobs(_) => "no_logprobs",
            EvalError::UnknownExtractor(_) => "unknown_extractor",
            EvalError::UnknownSampler(_) => "unknown_sampler",
            EvalError::Dataset { .. } => "dataset_error",
            EvalError::Task { .. } => "task_error",
            EvalError::Store(_) => "storage_failure",
            EvalError::Aborted { .. } => "cancelled",
        }
    }
}

/// Rounds half away from zero at two decimals, for reporting only.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    // absorbs binary representation error such as 12.345 * 100 = 1234.4999999999998
    let nudged = scaled + scaled.abs().max(1.0) * 1e-12;
    (nudged + 0.5).floor() / 100.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Record failed task validation; no request issued.
    InvalidRecord,
    /// The endpoint kept failing after client retries.
    EndpointError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionVerdict {
    pub record_id: String,
    pub gold_label: String,
    pub chosen_label: Option<String>,
    pub correct: bool,
    pub candidates: Vec<TokenCandidate>,
    pub no_valid_response: bool,
    #[serde(with = "crate::serde_util::duration_ms", rename = "latency_ms")]
    pub latency: Duration,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<SkipReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// SHA-256 of the exact prompt sent; the dataset reproduces the text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
}

impl QuestionVerdict {
    pub fn answered(instance: &PromptInstance, candidates: Vec<TokenCandidate>, chosen: Option<String>, latency: Duration) -> Self {
        let correct = chosen.as_deref() == Some(instance.gold_label.as_str());
        Self {
            record_id: instance.record_id.clone(),
            gold_label: instance.gold_label.clone(),
            no_valid_response: chosen.is_none(),
            chosen_label: chosen,
            correct,
            candidates,
            latency,
            skipped: false,
            skip_reason: None,
            detail: instance.fewshot_shortfall.map(|(want, got)| format!("few-shot shortfall: {got} of {want}")),
            prompt_sha256: Some(prompt_digest(&instance.prompt_text)),
        }
    }

    pub fn skipped(record_id: &str, gold_label: &str, reason: SkipReason, detail: impl Into<String>) -> Self {
        Self {
            record_id: record_id.to_string(),
            gold_label: gold_label.to_string(),
            chosen_label: None,
            correct: false,
            candidates: Vec::new(),
            no_valid_response: false,
            latency: Duration::ZERO,
            skipped: true,
            skip_reason: Some(reason),
            detail: Some(detail.into()),
            prompt_sha256: None,
        }
    }

    /// Everything except timing, for comparing runs.
    pub fn outcome_key(&self) -> String {
        let mut v = self.clone();
        v.latency = Duration::ZERO;
        serde_json::to_string(&v).expect("verdicts serialize")
    }
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub total: usize,
    pub answered: usize,
    pub correct_count: usize,
    pub no_valid_response: usize,
    pub skipped: usize,
    /// Full precision percentage; `None` when every question was skipped.
    pub accuracy: Option<f64>,
    /// Two-decimal rendering of `accuracy` for display.
    pub accuracy_display: Option<String>,
    pub complete: bool,
}

impl TaskScore {
    pub fn from_verdicts<'a>(task: &str, verdicts: impl IntoIterator<Item = &'a QuestionVerdict>, complete: bool) -> Self {
        let (mut total, mut answered, mut correct, mut nvr, mut skipped) = (0, 0, 0, 0, 0);
        for v in verdicts {
            total += 1;
            if v.skipped {
                skipped += 1;
            } else if v.no_valid_response {
                nvr += 1;
            } else {
                answered += 1;
                if v.correct {
                    correct += 1;
                }
            }
        }
        let scored = total - skipped;
        let accuracy = (scored > 0).then(|| 100.0 * correct as f64 / scored as f64);
        Self {
            task: task.to_string(),
            total,
            answered,
            correct_count: correct,
            no_valid_response: nvr,
            skipped,
            accuracy,
            accuracy_display: accuracy.map(|a| format!("{:.2}", round2(a))),
            complete,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("average undefined: task `{0}` has no score")]
pub struct UndefinedAverage(pub String);

/// Unweighted mean of task accuracies, rounded half-up to two decimals.
pub fn aggregate_average(scores: &[TaskScore]) -> Result<f64, UndefinedAverage> {
    let values = scores
        .iter()
        .map(|s| s.accuracy.ok_or_else(|| UndefinedAverage(s.task.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate_values(&values).ok_or_else(|| UndefinedAverage(String::new()))
}

/// Same arithmetic over bare percentages; `None` for an empty slice.
pub fn aggregate_values(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(round2(values.iter().sum::<f64>() / values.len() as f64))
}

/// Shared cancellation flag observed between question dispatches.
#[derive(Debug, Clone, Default)]
pub struct CancelFlag(Arc<AtomicBool>);

impl CancelFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct EvalJob {
    pub run_id: String,
    pub endpoint: EndpointConfig,
    pub tasks: Vec<TaskConfig>,
    pub k: usize,
    pub concurrency_limit: usize,
    pub extractor: String,
}

impl EvalJob {
    pub fn new(run_id: impl Into<String>, endpoint: EndpointConfig, tasks: Vec<TaskConfig>) -> Result<Self, EvalError> {
        let job = Self {
            run_id: run_id.into(),
            endpoint,
            tasks,
            k: DEFAULT_K,
            concurrency_limit: 8,
            extractor: DEFAULT_EXTRACTOR.to_string(),
        };
        job.validate()?;
        Ok(job)
    }

    pub fn with_k(mut self, k: usize) -> Result<Self, EvalError> {
        self.k = k;
        self.validate()?;
        Ok(self)
    }

    pub fn with_concurrency(mut self, limit: usize) -> Result<Self, EvalError> {
        self.concurrency_limit = limit;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.tasks.is_empty() {
            return Err(EvalError::InvalidJob("job has no tasks".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task.as_str()) {
                return Err(EvalError::InvalidJob(format!("task `{}` listed twice", t.task)));
            }
        }
        if self.k == 0 {
            return Err(EvalError::InvalidJob("k must be at least 1".into()));
        }
        if self.concurrency_limit == 0 {
            return Err(EvalError::InvalidJob("concurrency limit must be at least 1".into()));
        }
        self.endpoint.validate().map_err(EvalError::InvalidJob)
    }
}

/// Where verdicts go as they are produced.
pub trait VerdictSink: Send + Sync {
    fn task_started(&self, _task: &str, _total: usize) -> Result<(), StoreError> {
        Ok(())
    }

    fn record(&self, task: &str, verdict: &QuestionVerdict) -> Result<(), StoreError>;
}

/// Collects verdicts in memory; useful when no store is involved.
#[derive(Debug, Default)]
pub struct MemorySink(pub std::sync::Mutex<Vec<(String, QuestionVerdict)>>);

impl VerdictSink for MemorySink {
    fn record(&self, task: &str, verdict: &QuestionVerdict) -> Result<(), StoreError> {
        self.0.lock().expect("sink poisoned").push((task.to_string(), verdict.clone()));
        Ok(())
    }
}

/// Resolves task datasets.
pub trait DatasetSource: Send + Sync {
    fn load(&self, task: &TaskConfig) -> Result<Dataset, DatasetError>;
}

/// `<root>/<dataset_path>[/<subset>]/<split>.jsonl`
#[derive(Debug, Clone)]
pub struct DataRoot(pub PathBuf);

impl DatasetSource for DataRoot {
    fn load(&self, task: &TaskConfig) -> Result<Dataset, DatasetError> {
        dataset::load_for_task(&self.0, task)
    }
}

impl DatasetSource for BTreeMap<String, Dataset> {
    fn load(&self, task: &TaskConfig) -> Result<Dataset, DatasetError> {
        self.get(&task.task).cloned().ok_or_else(|| DatasetError::NotFound(PathBuf::from(&task.dataset_path)))
    }
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub score: TaskScore,
    pub verdicts: Vec<QuestionVerdict>,
}

/// Either a verdict that needs no request, or a question to send.
enum Work {
    Ready(QuestionVerdict),
    Ask(PromptInstance),
}

#[derive(Clone)]
pub struct Evaluator {
    client: InferenceClient,
    extractors: ExtractorRegistry,
    samplers: SamplerRegistry,
}

impl Default for Evaluator {
    fn default() -> Self {
        Self::new(InferenceClient::new())
    }
}

impl Evaluator {
    pub fn new(client: InferenceClient) -> Self {
        Self { client, extractors: ExtractorRegistry::default(), samplers: SamplerRegistry::default() }
    }

    pub fn with_registries(client: InferenceClient, extractors: ExtractorRegistry, samplers: SamplerRegistry) -> Self {
        Self { client, extractors, samplers }
    }

    pub fn client(&self) -> &InferenceClient {
        &self.client
    }

    fn extractor(&self, job: &EvalJob) -> Result<Arc<dyn AnswerExtractor>, EvalError> {
        self.extractors.get(&job.extractor).ok_or_else(|| EvalError::UnknownExtractor(job.extractor.clone()))
    }

    /// Sends one question and scores it. Endpoint failures become a skipped
    /// verdict; a missing distribution is fatal for the whole run.
    pub async fn evaluate_question(
        &self,
        job: &EvalJob,
        extractor: &dyn AnswerExtractor,
        instance: &PromptInstance,
    ) -> Result<QuestionVerdict, EvalError> {
        let started = Instant::now();
        match self.client.top_k_next_tokens(&job.endpoint, &instance.prompt_text, job.k).await {
            Ok(candidates) => {
                let chosen = extractor.extract(&candidates, &instance.valid_labels);
                Ok(QuestionVerdict::answered(instance, candidates, chosen, started.elapsed()))
            }
            Err(ClientError::NoLogprobs(msg)) => Err(EvalError::NoLogprobs(msg)),
            Err(e) => {
                let mut v = QuestionVerdict::skipped(&instance.record_id, &instance.gold_label, SkipReason::EndpointError, e.to_string());
                v.latency = started.elapsed();
                v.prompt_sha256 = Some(prompt_digest(&instance.prompt_text));
                Ok(v)
            }
        }
    }

    fn plan(&self, task: &TaskConfig, ds: &Dataset) -> Result<Vec<Work>, EvalError> {
        let task_err = |source| EvalError::Task { task: task.task.clone(), source };
        let report = dataset::validate_against_task(ds, task);
        let test = ds
            .split(&task.test_split)
            .map_err(|source| EvalError::Dataset { task: task.task.clone(), source })?;

        let pool: Vec<Record> = match (&task.fewshot_split, task.fewshot.num_fewshot) {
            (Some(split), n) if n > 0 => ds
                .split(split)
                .map_err(|source| EvalError::Dataset { task: task.task.clone(), source })?
                .iter()
                .filter(|r| !report.is_defective(split, &r.id))
                .cloned()
                .collect(),
            _ => Vec::new(),
        };
        let sampler = self
            .samplers
            .get(&task.fewshot.sampler)
            .ok_or_else(|| EvalError::UnknownSampler(task.fewshot.sampler.clone()))?;

        let mut work = Vec::with_capacity(test.len());
        for record in test {
            let gold = crate::taskdef::gold_label(task, record).unwrap_or_default().to_string();
            let defects: Vec<String> = report
                .defects_for(&task.test_split, &record.id)
                .map(|d| serde_json::to_string(&d.kind).unwrap_or_default())
                .collect();
            if !defects.is_empty() {
                work.push(Work::Ready(QuestionVerdict::skipped(&record.id, &gold, SkipReason::InvalidRecord, defects.join("; "))));
                continue;
            }
            let built = sampler.select(&pool, record, &task.fewshot).and_then(|sel| {
                let shots = sel.records(&pool);
                build_prompt_instance(task, record, &shots).map(|inst| inst.with_shortfall(sel.shortfall))
            });
            match built {
                Ok(inst) => work.push(Work::Ask(inst)),
                Err(e @ (TaskError::MissingRecordField { .. }
                | TaskError::IndexOutOfBounds { .. }
                | TaskError::TypeMismatch { .. }
                | TaskError::MissingFilterColumn { .. }
                | TaskError::TargetOutOfRange { .. })) => {
                    work.push(Work::Ready(QuestionVerdict::skipped(&record.id, &gold, SkipReason::InvalidRecord, e.to_string())));
                }
                Err(e) => return Err(task_err(e)),
            }
        }
        Ok(work)
    }

    /// Evaluates one task's test split. Every test record yields exactly one
    /// verdict, streamed to `sink` in completion order.
    pub async fn evaluate_task(
        &self,
        job: &EvalJob,
        task: &TaskConfig,
        ds: &Dataset,
        sink: &dyn VerdictSink,
        cancel: &CancelFlag,
    ) -> Result<TaskOutcome, EvalError> {
        let extractor = self.extractor(job)?;
        let work = self.plan(task, ds)?;
        sink.task_started(&task.task, work.len())?;

        let mut verdicts = Vec::with_capacity(work.len());
        let mut questions = Vec::new();
        for w in work {
            match w {
                Work::Ready(v) => {
                    sink.record(&task.task, &v)?;
                    verdicts.push(v);
                }
                Work::Ask(inst) => questions.push(inst),
            }
        }

        let aborted = |verdicts: Vec<QuestionVerdict>| EvalError::Aborted {
            partial: Box::new(TaskOutcome { score: TaskScore::from_verdicts(&task.task, &verdicts, false), verdicts }),
        };

        let mut rest = questions.into_iter();
        // The first question goes alone so an endpoint without logprobs is
        // rejected before the rest of the task is dispatched.
        if let Some(first) = rest.next() {
            if cancel.is_cancelled() {
                return Err(aborted(verdicts));
            }
            let v = self.evaluate_question(job, extractor.as_ref(), &first).await?;
            sink.record(&task.task, &v)?;
            verdicts.push(v);
        }

        let in_flight = futures::stream::iter(rest)
            .take_while(|_| futures::future::ready(!cancel.is_cancelled()))
            .map(|inst| {
                let extractor = extractor.clone();
                async move { self.evaluate_question(job, extractor.as_ref(), &inst).await }
            })
            .buffer_unordered(job.concurrency_limit);
        futures::pin_mut!(in_flight);
        while let Some(result) = in_flight.next().await {
            // Answers landing after a cancel are dropped, not recorded.
            if cancel.is_cancelled() {
                break;
            }
            let v = result?;
            sink.record(&task.task, &v)?;
            verdicts.push(v);
        }

        if cancel.is_cancelled() && verdicts.len() < ds.split(&task.test_split).map(|s| s.len()).unwrap_or(0) {
            return Err(aborted(verdicts));
        }
        Ok(TaskOutcome { score: TaskScore::from_verdicts(&task.task, &verdicts, true), verdicts })
    }

    /// Runs every task of a job against a store-registered run. The run must
    /// already exist (pending). Terminal status is completed, failed or cancelled.
    pub async fn evaluate_run(
        &self,
        job: &EvalJob,
        store: &RunStore,
        datasets: &dyn DatasetSource,
        cancel: &CancelFlag,
    ) -> Result<RunRecord, EvalError> {
        job.validate()?;
        store.mark_running(&job.run_id)?;
        let sink = store.sink(&job.run_id);

        let mut scores = Vec::with_capacity(job.tasks.len());
        for task in &job.tasks {
            if cancel.is_cancelled() {
                store.finish(&job.run_id, RunStatus::Cancelled, None, None)?;
                return Ok(store.get_run(&job.run_id)?);
            }
            let ds = match datasets.load(task) {
                Ok(ds) => ds,
                Err(source) => {
                    let err = EvalError::Dataset { task: task.task.clone(), source };
                    store.finish(&job.run_id, RunStatus::Failed, None, Some(err.to_string()))?;
                    return Ok(store.get_run(&job.run_id)?);
                }
            };
            match self.evaluate_task(job, task, &ds, &sink, cancel).await {
                Ok(outcome) => {
                    store.set_task_score(&job.run_id, &outcome.score)?;
                    scores.push(outcome.score);
                }
                Err(EvalError::Aborted { partial }) => {
                    store.set_task_score(&job.run_id, &partial.score)?;
                    store.finish(&job.run_id, RunStatus::Cancelled, None, None)?;
                    return Ok(store.get_run(&job.run_id)?);
                }
                Err(e) => {
                    tracing::warn!(run = %job.run_id, task = %task.task, error = %e, "task failed");
                    store.finish(&job.run_id, RunStatus::Failed, None, Some(e.to_string()))?;
                    return Ok(store.get_run(&job.run_id)?);
                }
            }
        }
        let average = aggregate_average(&scores).ok();
        store.finish(&job.run_id, RunStatus::Completed, average, None)?;
        Ok(store.get_run(&job.run_id)?)
    }
}
