//! Benchmark datasets in a neutral JSON-lines record format.
//!
//! Layout on disk is `<root>/<name>[/<subset>]/<split>.jsonl`, one record object
//! per line. Record order is file order and is preserved through every load.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskdef::TaskConfig;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset not found: {0}")]
    NotFound(PathBuf),
    #[error("{path}:{line}: {reason}")]
    ParseError { path: PathBuf, line: usize, reason: String },
    #[error("duplicate record id `{id}` in split `{split}`")]
    DuplicateId { split: String, id: String },
    #[error("split `{0}` not present in dataset")]
    MissingSplit(String),
    #[error("io error reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// A record field value: a string, an integer, or a list of strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Str(String),
    List(Vec<String>),
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<i64> for Value {
    fn from(n: i64) -> Self {
        Value::Int(n)
    }
}

impl From<Vec<String>> for Value {
    fn from(v: Vec<String>) -> Self {
        Value::List(v)
    }
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(n) => Some(*n),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub fields: BTreeMap<String, Value>,
}

impl Record {
    pub fn new(id: impl Into<String>, fields: impl IntoIterator<Item = (String, Value)>) -> Self {
        Self { id: id.into(), fields: fields.into_iter().collect() }
    }

    pub fn get(&self, field: &str) -> Option<&Value> {
        self.fields.get(field)
    }

    /// Parses one JSON-lines object. `id` is taken from the object when present
    /// (string or integer) and synthesized as `<split>-<line>` otherwise.
    pub fn from_json_line(line: &str, split: &str, line_no: usize) -> Result<Self, String> {
        let obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(line).map_err(|e| e.to_string())?;
        let mut id = None;
        let mut fields = BTreeMap::new();
        for (key, raw) in obj {
            if key == "id" {
                id = Some(match raw {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Number(n) if n.is_i64() || n.is_u64() => n.to_string(),
                    other => return Err(format!("`id` must be a string or integer, got {other}")),
                });
                continue;
            }
            let value = match raw {
                serde_json::Value::String(s) => Value::Str(s),
                serde_json::Value::Number(n) => {
                    Value::Int(n.as_i64().ok_or_else(|| format!("field `{key}`: {n} is not an integer"))?)
                }
                serde_json::Value::Array(items) => Value::List(
                    items
                        .into_iter()
                        .map(|item| match item {
                            serde_json::Value::String(s) => Ok(s),
                            other => Err(format!("field `{key}`: list item {other} is not a string")),
                        })
                        .collect::<Result<_, _>>()?,
                ),
                other => return Err(format!("field `{key}`: unsupported value {other}")),
            };
            fields.insert(key, value);
        }
        Ok(Self { id: id.unwrap_or_else(|| format!("{split}-{line_no}")), fields })
    }

    pub fn to_json_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), serde_json::Value::String(self.id.clone()));
        for (k, v) in &self.fields {
            obj.insert(k.clone(), serde_json::to_value(v).expect("record values serialize"));
        }
        serde_json::Value::Object(obj).to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub subset: Option<String>,
    pub splits: BTreeMap<String, Vec<Record>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Record], DatasetError> {
        self.splits.get(name).map(Vec::as_slice).ok_or_else(|| DatasetError::MissingSplit(name.to_string()))
    }
}

/// Loads every `<split>.jsonl` file under `path` (joined with `subset` when given).
pub fn load_dataset(path: &Path, subset: Option<&str>) -> Result<Dataset, DatasetError> {
    let dir = match subset {
        Some(s) => path.join(s),
        None => path.to_path_buf(),
    };
    if !dir.is_dir() {
        return Err(DatasetError::NotFound(dir));
    }
    let entries = fs::read_dir(&dir).map_err(|source| DatasetError::Io { path: dir.clone(), source })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| DatasetError::Io { path: dir.clone(), source })?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()) == Some("jsonl") && p.is_file() {
            files.push(p);
        }
    }
    files.sort();

    let mut splits = BTreeMap::new();
    for file in files {
        let split = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let records = load_split(&file, &split)?;
        splits.insert(split, records);
    }
    Ok(Dataset {
        name: path.display().to_string(),
        subset: subset.map(str::to_string),
        splits,
    })
}

/// Resolves a task's `dataset_path` against a data root and loads it.
pub fn load_for_task(data_root: &Path, task: &TaskConfig) -> Result<Dataset, DatasetError> {
    let mut ds = load_dataset(&data_root.join(&task.dataset_path), task.dataset_subset.as_deref())?;
    ds.name = task.dataset_path.clone();
    Ok(ds)
}

fn load_split(file: &Path, split: &str) -> Result<Vec<Record>, DatasetError> {
    let text = fs::read_to_string(file).map_err(|source| DatasetError::Io { path: file.to_path_buf(), source })?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = Record::from_json_line(line, split, line_no).map_err(|reason| DatasetError::ParseError {
            path: file.to_path_buf(),
            line: line_no,
            reason,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId { split: split.to_string(), id: record.id });
        }
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefectKind {
    MissingField { field: String },
    WrongType { field: String, expected: String },
    TargetOutOfRange { value: i64, choices: usize },
    ChoicesLengthMismatch { field: String, expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Defect {
    pub split: String,
    pub record_id: String,
    #[serde(flatten)]
    pub kind: DefectKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub defects: Vec<Defect>,
}

impl ValidationReport {
    pub fn is_defective(&self, split: &str, record_id: &str) -> bool {
        self.defects.iter().any(|d| d.split == split && d.record_id == record_id)
    }

    pub fn defects_for<'a>(&'a self, split: &'a str, record_id: &'a str) -> impl Iterator<Item = &'a Defect> + 'a {
        self.defects.iter().filter(move |d| d.split == split && d.record_id == record_id)
    }
}

/// Checks the test and few-shot splits against what the task will read from
/// each record. Defects are collected, never raised.
pub fn validate_against_task(ds: &Dataset, task: &TaskConfig) -> ValidationReport {
    let mut defects = Vec::new();
    let mut splits = vec![task.test_split.as_str()];
    if task.fewshot.num_fewshot > 0 {
        if let Some(fs) = task.fewshot_split.as_deref() {
            if fs != task.test_split {
                splits.push(fs);
            }
        }
    }
    for split in splits {
        let Some(records) = ds.splits.get(split) else { continue };
        for record in records {
            for kind in record_defects(record, task) {
                defects.push(Defect { split: split.to_string(), record_id: record.id.clone(), kind });
            }
        }
    }
    ValidationReport { ok: defects.is_empty(), defects }
}

fn record_defects(record: &Record, task: &TaskConfig) -> Vec<DefectKind> {
    let mut out = Vec::new();
    let n_choices = task.doc_to_choice.len();

    for p in task.doc_to_text.placeholders() {
        match (record.get(&p.field), p.index) {
            (None, _) => push_unique(&mut out, DefectKind::MissingField { field: p.field.clone() }),
            (Some(Value::List(items)), Some(_)) => {
                if items.len() != n_choices {
                    push_unique(
                        &mut out,
                        DefectKind::ChoicesLengthMismatch { field: p.field.clone(), expected: n_choices, found: items.len() },
                    );
                }
            }
            (Some(_), Some(_)) => push_unique(
                &mut out,
                DefectKind::WrongType { field: p.field.clone(), expected: "list".into() },
            ),
            (Some(Value::Str(_)), None) => {}
            (Some(Value::Int(_)), None) if !p.strip => {}
            (Some(_), None) => push_unique(
                &mut out,
                DefectKind::WrongType { field: p.field.clone(), expected: "string".into() },
            ),
        }
    }

    match record.get(&task.doc_to_target) {
        None => out.push(DefectKind::MissingField { field: task.doc_to_target.clone() }),
        Some(Value::Int(v)) => {
            if *v < 0 || *v as usize >= n_choices {
                out.push(DefectKind::TargetOutOfRange { value: *v, choices: n_choices });
            }
        }
        Some(_) => out.push(DefectKind::WrongType { field: task.doc_to_target.clone(), expected: "integer".into() }),
    }

    if let Some(col) = &task.fewshot.filter_column {
        if task.fewshot.num_fewshot > 0 && record.get(col).is_none() {
            push_unique(&mut out, DefectKind::MissingField { field: col.clone() });
        }
    }
    out
}

fn push_unique(out: &mut Vec<DefectKind>, kind: DefectKind) {
    if !out.contains(&kind) {
        out.push(kind);
    }
}
