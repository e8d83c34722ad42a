use std::collections::HashSet;

use serde_yaml::{Mapping, Value as Yaml};

use super::fewshot::SamplerRegistry;
use super::template::PromptTemplate;
use super::TaskError;

const TOP_LEVEL_KEYS: &[&str] = &[
    "task",
    "dataset_path",
    "dataset_subset",
    "test_split",
    "fewshot_split",
    "fewshot_config",
    "doc_to_text",
    "doc_to_choice",
    "doc_to_target",
    "metadata",
];
const FEWSHOT_KEYS: &[&str] = &["sampler", "filter_column", "num_fewshot"];
const METADATA_KEYS: &[&str] = &["version"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotConfig {
    /// Name of a sampler registered in [`SamplerRegistry`].
    pub sampler: String,
    pub filter_column: Option<String>,
    pub num_fewshot: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self { sampler: "first_n".to_string(), filter_column: None, num_fewshot: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskConfig {
    pub task: String,
    pub dataset_path: String,
    pub dataset_subset: Option<String>,
    pub test_split: String,
    pub fewshot_split: Option<String>,
    /// Zero-shot when the YAML has no `fewshot_config` block.
    pub fewshot: FewShotConfig,
    pub doc_to_text: PromptTemplate,
    pub doc_to_choice: Vec<String>,
    pub doc_to_target: String,
    pub metadata_version: Option<String>,
}

/// Parses a task definition with the default sampler registry.
pub fn parse_task_config(yaml_text: &str) -> Result<TaskConfig, TaskError> {
    TaskConfig::parse_with(yaml_text, &SamplerRegistry::default())
}

impl TaskConfig {
    pub fn parse_with(yaml_text: &str, samplers: &SamplerRegistry) -> Result<Self, TaskError> {
        let doc: Yaml = serde_yaml::from_str(yaml_text).map_err(|e| TaskError::MalformedYaml(e.to_string()))?;
        let root = doc
            .as_mapping()
            .ok_or_else(|| TaskError::MalformedYaml("top level must be a mapping".into()))?;
        check_keys(root, TOP_LEVEL_KEYS, "")?;

        let fewshot = match root.get("fewshot_config") {
            None | Some(Yaml::Null) => FewShotConfig::default(),
            Some(v) => parse_fewshot(v)?,
        };
        if !samplers.contains(&fewshot.sampler) {
            return Err(TaskError::BadSampler(fewshot.sampler));
        }

        let template_src = required_str(root, "doc_to_text")?;
        let cfg = TaskConfig {
            task: required_str(root, "task")?,
            dataset_path: required_str(root, "dataset_path")?,
            dataset_subset: optional_str(root, "dataset_subset")?,
            test_split: required_str(root, "test_split")?,
            fewshot_split: optional_str(root, "fewshot_split")?,
            fewshot,
            doc_to_text: PromptTemplate::parse(&template_src)?,
            doc_to_choice: parse_choices(root)?,
            doc_to_target: required_str(root, "doc_to_target")?,
            metadata_version: parse_metadata(root.get("metadata"))?,
        };
        cfg.check_invariants()?;
        Ok(cfg)
    }

    fn check_invariants(&self) -> Result<(), TaskError> {
        if self.task.trim().is_empty() {
            return Err(TaskError::MalformedConfig("`task` must not be empty".into()));
        }
        if self.doc_to_choice.is_empty() {
            return Err(TaskError::MalformedConfig("`doc_to_choice` must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for label in &self.doc_to_choice {
            let norm = crate::extract::normalize(label);
            if norm.is_empty() {
                return Err(TaskError::MalformedConfig(format!("choice label {label:?} is blank")));
            }
            if !seen.insert(norm) {
                return Err(TaskError::MalformedConfig(format!(
                    "choice label {label:?} collides with another label after lowercasing and trimming"
                )));
            }
        }
        if self.fewshot.num_fewshot > 0 && self.fewshot_split.is_none() {
            return Err(TaskError::MalformedConfig("`num_fewshot` > 0 requires `fewshot_split`".into()));
        }
        Ok(())
    }
}

fn check_keys(map: &Mapping, allowed: &[&str], prefix: &str) -> Result<(), TaskError> {
    for key in map.keys() {
        let name = key.as_str().ok_or_else(|| TaskError::MalformedYaml(format!("non-string key {key:?}")))?;
        if !allowed.contains(&name) {
            return Err(TaskError::UnknownKey(format!("{prefix}{name}")));
        }
    }
    Ok(())
}

fn scalar_to_string(key: &str, v: &Yaml) -> Result<String, TaskError> {
    match v {
        Yaml::String(s) => Ok(s.clone()),
        Yaml::Number(n) => Ok(n.to_string()),
        _ => Err(TaskError::MalformedConfig(format!("`{key}` must be a string"))),
    }
}

fn required_str(map: &Mapping, key: &str) -> Result<String, TaskError> {
    match map.get(key) {
        None | Some(Yaml::Null) => Err(TaskError::MissingField(key.to_string())),
        Some(v) => scalar_to_string(key, v),
    }
}

fn optional_str(map: &Mapping, key: &str) -> Result<Option<String>, TaskError> {
    match map.get(key) {
        None | Some(Yaml::Null) => Ok(None),
        Some(v) => scalar_to_string(key, v).map(Some),
    }
}

fn parse_fewshot(v: &Yaml) -> Result<FewShotConfig, TaskError> {
    let map = v
        .as_mapping()
        .ok_or_else(|| TaskError::MalformedConfig("`fewshot_config` must be a mapping".into()))?;
    check_keys(map, FEWSHOT_KEYS, "fewshot_config.")?;
    let defaults = FewShotConfig::default();
    let num_fewshot = match map.get("num_fewshot") {
        None | Some(Yaml::Null) => 0,
        Some(Yaml::Number(n)) => n
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| TaskError::MalformedConfig(format!("`num_fewshot` must be a non-negative integer, got {n}")))?,
        Some(_) => return Err(TaskError::MalformedConfig("`num_fewshot` must be an integer".into())),
    };
    Ok(FewShotConfig {
        sampler: optional_str(map, "sampler")?.unwrap_or(defaults.sampler),
        filter_column: optional_str(map, "filter_column")?,
        num_fewshot,
    })
}

fn parse_choices(map: &Mapping) -> Result<Vec<String>, TaskError> {
    match map.get("doc_to_choice") {
        None | Some(Yaml::Null) => Err(TaskError::MissingField("doc_to_choice".into())),
        Some(Yaml::Sequence(items)) => items.iter().map(|i| scalar_to_string("doc_to_choice", i)).collect(),
        Some(_) => Err(TaskError::MalformedConfig("`doc_to_choice` must be a list".into())),
    }
}

/// Accepts `metadata: [{version: ...}]` (the list form) or `metadata: {version: ...}`.
fn parse_metadata(v: Option<&Yaml>) -> Result<Option<String>, TaskError> {
    let mut version = None;
    let mut visit = |m: &Mapping| -> Result<(), TaskError> {
        check_keys(m, METADATA_KEYS, "metadata.")?;
        if let Some(v) = optional_str(m, "version")? {
            version = Some(v);
        }
        Ok(())
    };
    match v {
        None | Some(Yaml::Null) => {}
        Some(Yaml::Mapping(m)) => visit(m)?,
        Some(Yaml::Sequence(items)) => {
            for item in items {
                let m = item
                    .as_mapping()
                    .ok_or_else(|| TaskError::MalformedConfig("`metadata` entries must be mappings".into()))?;
                visit(m)?;
            }
        }
        Some(_) => return Err(TaskError::MalformedConfig("`metadata` must be a list or mapping".into())),
    }
    Ok(version)
}
