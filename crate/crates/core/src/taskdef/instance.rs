use serde::{Deserialize, Serialize};

use crate::dataset::{Record, Value};

use super::{Shortfall, TaskConfig, TaskError};

/// A fully assembled question ready to send to a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub record_id: String,
    pub prompt_text: String,
    pub valid_labels: Vec<String>,
    pub gold_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot_shortfall: Option<(usize, usize)>,
}

/// Gold label for a record: `doc_to_choice[record[doc_to_target]]`.
pub fn gold_label<'a>(task: &'a TaskConfig, record: &Record) -> Result<&'a str, TaskError> {
    let raw = record.get(&task.doc_to_target).ok_or_else(|| TaskError::MissingRecordField {
        record_id: record.id.clone(),
        field: task.doc_to_target.clone(),
    })?;
    let Value::Int(value) = raw else {
        return Err(TaskError::TypeMismatch {
            record_id: record.id.clone(),
            field: task.doc_to_target.clone(),
            expected: "integer".into(),
        });
    };
    usize::try_from(*value)
        .ok()
        .and_then(|i| task.doc_to_choice.get(i))
        .map(String::as_str)
        .ok_or_else(|| TaskError::TargetOutOfRange {
            record_id: record.id.clone(),
            value: *value,
            choices: task.doc_to_choice.len(),
        })
}

/// Few-shot examples are each rendered, followed by `" "` + gold label +
/// `"\n\n"`; the rendered test question comes last with nothing appended.
pub fn build_prompt_instance(
    task: &TaskConfig,
    test_record: &Record,
    fewshot: &[&Record],
) -> Result<PromptInstance, TaskError> {
    let gold = gold_label(task, test_record)?;
    let mut prompt = String::new();
    for example in fewshot {
        let label = gold_label(task, example)?;
        prompt.push_str(&task.doc_to_text.render(example)?);
        prompt.push(' ');
        prompt.push_str(label);
        prompt.push_str("\n\n");
    }
    prompt.push_str(&task.doc_to_text.render(test_record)?);
    Ok(PromptInstance {
        record_id: test_record.id.clone(),
        prompt_text: prompt,
        valid_labels: task.doc_to_choice.clone(),
        gold_label: gold.to_string(),
        fewshot_shortfall: None,
    })
}

impl PromptInstance {
    pub fn with_shortfall(mut self, shortfall: Option<Shortfall>) -> Self {
        self.fewshot_shortfall = shortfall.map(|s| (s.requested, s.available));
        self
    }
}
