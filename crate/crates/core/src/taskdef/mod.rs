//! YAML task definitions and multiple-choice prompt construction.

mod config;
mod fewshot;
mod instance;
mod template;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{parse_task_config, FewShotConfig, TaskConfig};
pub use fewshot::{FewShotSampler, FewShotSelection, FirstN, SamplerRegistry, Shortfall};
pub use instance::{build_prompt_instance, gold_label, PromptInstance};
pub use template::{Placeholder, PromptTemplate, Segment};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("malformed yaml: {0}")]
    MalformedYaml(String),
    #[error("missing required key `{0}`")]
    MissingField(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad template: {reason}")]
    BadTemplate { reason: String },
    #[error("unknown few-shot sampler `{0}`")]
    BadSampler(String),
    #[error("malformed task config: {0}")]
    MalformedConfig(String),
    #[error("record `{record_id}` has no field `{field}`")]
    MissingRecordField { record_id: String, field: String },
    #[error("record `{record_id}`: index {index} out of bounds for `{field}` (len {len})")]
    IndexOutOfBounds { record_id: String, field: String, index: usize, len: usize },
    #[error("record `{record_id}`: field `{field}` is not a {expected}")]
    TypeMismatch { record_id: String, field: String, expected: String },
    #[error("record `{record_id}`: filter column `{field}` missing")]
    MissingFilterColumn { record_id: String, field: String },
    #[error("record `{record_id}`: target {value} is not an index into {choices} choices")]
    TargetOutOfRange { record_id: String, value: i64, choices: usize },
    #[error("duplicate task `{task}` in {first} and {second}")]
    DuplicateTask { task: String, first: PathBuf, second: PathBuf },
    #[error("{path}: {source}")]
    InFile { path: PathBuf, source: Box<TaskError> },
    #[error("io error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// Every task found in a tasks directory, keyed by the `task` field.
#[derive(Debug, Clone, Default)]
pub struct TaskCatalog {
    tasks: BTreeMap<String, (PathBuf, TaskConfig)>,
}

impl TaskCatalog {
    /// Reads every `*.yaml` / `*.yml` file directly under `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TaskError> {
        let io = |e: std::io::Error| TaskError::Io { path: dir.to_path_buf(), reason: e.to_string() };
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let p = entry.map_err(io)?.path();
            let ext = p.extension().and_then(|e| e.to_str());
            if matches!(ext, Some("yaml" | "yml")) && p.is_file() {
                paths.push(p);
            }
        }
        paths.sort();

        let mut catalog = Self::default();
        for path in paths {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| TaskError::Io { path: path.clone(), reason: e.to_string() })?;
            let cfg = parse_task_config(&text)
                .map_err(|e| TaskError::InFile { path: path.clone(), source: Box::new(e) })?;
            catalog.insert(path, cfg)?;
        }
        Ok(catalog)
    }

    pub fn insert(&mut self, path: PathBuf, cfg: TaskConfig) -> Result<(), TaskError> {
        if let Some((first, _)) = self.tasks.get(&cfg.task) {
            return Err(TaskError::DuplicateTask { task: cfg.task.clone(), first: first.clone(), second: path });
        }
        self.tasks.insert(cfg.task.clone(), (path, cfg));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TaskConfig> {
        self.tasks.get(name).map(|(_, c)| c)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskConfig> {
        self.tasks.values().map(|(_, c)| c)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}
