//! Topic-balanced subset selection over pre-labelled records.
//!
//! Topic assignment happens elsewhere; records arrive already grouped by an
//! integer topic id (`-1` conventionally holds outliers).

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("line {line}: {reason}")]
    BadInput { line: usize, reason: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    /// Everything else on the input line, carried through untouched.
    #[serde(flatten)]
    pub payload: Map<String, Json>,
}

impl RawRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), payload: Map::new() }
    }
}

/// Topic id to records, iterated in ascending topic order. Each record list
/// is consumed from the front.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopicMap {
    entries: BTreeMap<i64, VecDeque<RawRecord>>,
}

impl TopicMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, topic: i64, record: RawRecord) {
        self.entries.entry(topic).or_default().push_back(record);
    }

    pub fn topics(&self) -> impl Iterator<Item = (i64, &VecDeque<RawRecord>)> {
        self.entries.iter().map(|(t, r)| (*t, r))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Errors on the first repeated record id.
    pub fn check_unique_ids(&self) -> Result<(), CurationError> {
        let mut seen = HashSet::new();
        for r in self.entries.values().flatten() {
            if !seen.insert(r.id.as_str()) {
                return Err(CurationError::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }
}

impl FromIterator<(i64, RawRecord)> for TopicMap {
    fn from_iter<I: IntoIterator<Item = (i64, RawRecord)>>(iter: I) -> Self {
        let mut m = TopicMap::new();
        for (t, r) in iter {
            m.push(t, r);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub set_size: usize,
    pub min_underscore_run: usize,
    pub ascii_only: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { set_size: 10_000, min_underscore_run: 10, ascii_only: true }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.min_underscore_run == 0 {
            return Err(CurationError::BadConfig("min_underscore_run must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn is_clean(record: &RawRecord, cfg: &CurationConfig) -> bool {
    text_is_clean(&record.text, cfg)
}

pub fn text_is_clean(text: &str, cfg: &CurationConfig) -> bool {
    if cfg.ascii_only && !text.is_ascii() {
        return false;
    }
    let mut run = 0;
    for c in text.chars() {
        if c == '_' {
            run += 1;
            if run >= cfg.min_underscore_run {
                return false;
            }
        } else {
            run = 0;
        }
    }
    true
}

/// Round-robin selection: sweep topics in ascending id, popping each topic's
/// records until one is clean, take it, move on. Dirty records popped along
/// the way are discarded. Stops at `set_size` or when a full sweep finds
/// nothing left anywhere.
pub fn select_records(mut topics: TopicMap, cfg: &CurationConfig) -> Vec<(i64, RawRecord)> {
    let mut selected = Vec::with_capacity(cfg.set_size.min(topics.len()));
    while selected.len() < cfg.set_size {
        let mut took_any = false;
        for (&topic, records) in topics.entries.iter_mut() {
            if selected.len() >= cfg.set_size {
                break;
            }
            while let Some(r) = records.pop_front() {
                if is_clean(&r, cfg) {
                    selected.push((topic, r));
                    took_any = true;
                    break;
                }
            }
        }
        if !took_any {
            break;
        }
    }
    selected
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CurationReport {
    pub counts: BTreeMap<i64, usize>,
    pub total: usize,
}

impl CurationReport {
    /// Two-column table: topic, records, then a total row. `labels` supplies
    /// optional display names per topic.
    pub fn to_table(&self, labels: &BTreeMap<i64, String>) -> String {
        let rows: Vec<(String, String)> = self
            .counts
            .iter()
            .map(|(t, n)| (labels.get(t).cloned().unwrap_or_else(|| t.to_string()), n.to_string()))
            .collect();
        let total = ("Total".to_string(), thousands(self.total));
        let w0 = rows.iter().chain([&total]).map(|r| r.0.len()).max().unwrap_or(0).max("Topic".len());
        let w1 = rows.iter().chain([&total]).map(|r| r.1.len()).max().unwrap_or(0).max("Records".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<w0$}  {:>w1$}", "Topic", "Records");
        let _ = writeln!(out, "{}", "-".repeat(w0 + 2 + w1));
        for (t, n) in &rows {
            let _ = writeln!(out, "{t:<w0$}  {n:>w1$}");
        }
        let _ = writeln!(out, "{}", "-".repeat(w0 + 2 + w1));
        let _ = writeln!(out, "{:<w0$}  {:>w1$}", total.0, total.1);
        out
    }
}

pub fn curation_report(selection: &[(i64, RawRecord)]) -> CurationReport {
    let mut counts = BTreeMap::new();
    for (t, _) in selection {
        *counts.entry(*t).or_insert(0) += 1;
    }
    CurationReport { counts, total: selection.len() }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Deserialize)]
struct InputLine {
    id: Json,
    text: String,
    topic: i64,
    #[serde(default)]
    topic_name: Option<String>,
    #[serde(flatten)]
    payload: Map<String, Json>,
}

/// Reads `{"id", "text", "topic", ...}` lines. Returns the map plus any
/// `topic_name` labels found.
pub fn read_jsonl(reader: impl BufRead) -> Result<(TopicMap, BTreeMap<i64, String>), CurationError> {
    let mut map = TopicMap::new();
    let mut labels = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: InputLine =
            serde_json::from_str(&line).map_err(|e| CurationError::BadInput { line: i + 1, reason: e.to_string() })?;
        let id = match row.id {
            Json::String(s) => s,
            Json::Number(n) => n.to_string(),
            other => return Err(CurationError::BadInput { line: i + 1, reason: format!("id must be a string or number, got {other}") }),
        };
        if let Some(name) = row.topic_name {
            labels.entry(row.topic).or_insert(name);
        }
        map.push(row.topic, RawRecord { id, text: row.text, payload: row.payload });
    }
    map.check_unique_ids()?;
    Ok((map, labels))
}

pub fn write_jsonl(mut w: impl Write, selection: &[(i64, RawRecord)]) -> Result<(), CurationError> {
    for (topic, r) in selection {
        let mut obj = Map::new();
        obj.insert("id".into(), Json::String(r.id.clone()));
        obj.insert("text".into(), Json::String(r.text.clone()));
        obj.insert("topic".into(), Json::from(*topic));
        for (k, v) in &r.payload {
            obj.entry(k.clone()).or_insert_with(|| v.clone());
        }
        serde_json::to_writer(&mut w, &obj).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
