//! A scripted four-choice task whose score is known by construction.
//!
//! Question `i` gets scenario `i % 10`; every block of ten has seven correct
//! answers, so any task size that is a multiple of ten scores exactly 70%.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use serde_json::json;

use crate::Script;

pub const LABELS: [&str; 4] = ["A", "B", "C", "D"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Most probable token is the gold label.
    ModalCorrect,
    /// Most probable token is a wrong label.
    ModalWrong,
    /// Most probable token is not a label; the best label is gold.
    InvalidModalThenCorrect,
    /// Most probable token is not a label; the best label is wrong.
    InvalidModalThenWrong,
    /// No label anywhere in the top five.
    NoValid,
    /// Gold and a wrong label share the top probability; gold is reported first.
    TieGoldFirst,
}

impl Scenario {
    pub fn for_index(i: usize) -> Self {
        match i % 10 {
            0..=4 => Scenario::ModalCorrect,
            5 => Scenario::ModalWrong,
            6 => Scenario::InvalidModalThenCorrect,
            7 => Scenario::InvalidModalThenWrong,
            8 => Scenario::NoValid,
            _ => Scenario::TieGoldFirst,
        }
    }

    pub fn expect_correct(self) -> bool {
        matches!(self, Scenario::ModalCorrect | Scenario::InvalidModalThenCorrect | Scenario::TieGoldFirst)
    }

    pub fn modal_is_invalid(self) -> bool {
        matches!(self, Scenario::InvalidModalThenCorrect | Scenario::InvalidModalThenWrong | Scenario::NoValid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedQuestion {
    pub id: String,
    pub gold: usize,
    pub scenario: Scenario,
    pub script: Script,
}

impl ScriptedQuestion {
    pub fn gold_label(&self) -> &'static str {
        LABELS[self.gold]
    }
}

/// Varies case and whitespace so label matching has to normalize.
fn surface(label: &str, i: usize) -> String {
    match i % 4 {
        0 => label.to_string(),
        1 => format!(" {label}"),
        2 => label.to_lowercase(),
        _ => format!(" {} ", label.to_lowercase()),
    }
}

const FILLER: [&str; 5] = ["The", "Answer", "A.", ":", "\n"];

fn script_for(i: usize, gold: usize, scenario: Scenario) -> Script {
    let g = surface(LABELS[gold], i);
    let wrong_idx = (gold + 1 + i % 3) % 4;
    let w = surface(LABELS[wrong_idx], i + 1);
    let other_idx = (1..4).map(|d| (wrong_idx + d) % 4).find(|&j| j != gold).expect("four labels");
    let other = surface(LABELS[other_idx], i + 2);
    let s = |t: &str, lp: f64| (t.to_string(), lp);
    match scenario {
        Scenario::ModalCorrect => vec![s(&g, -0.2), s(&w, -2.0), s("The", -3.0), s(&other, -3.5), s(":", -4.0)],
        Scenario::ModalWrong => vec![s(&w, -0.3), s(&g, -1.6), s("Answer", -2.5), s(&other, -3.2), s("The", -4.1)],
        Scenario::InvalidModalThenCorrect => {
            vec![s(FILLER[i % 5], -0.4), s(&g, -1.2), s(&w, -1.9), s("So", -3.0), s(&other, -3.3)]
        }
        Scenario::InvalidModalThenWrong => {
            vec![s(FILLER[i % 5], -0.4), s(&w, -1.1), s(&g, -1.8), s("It", -2.7), s(&other, -3.9)]
        }
        Scenario::NoValid => vec![s("The", -0.5), s("correct", -1.4), s("answer", -2.0), s("is", -2.6), s("A.", -3.0)],
        Scenario::TieGoldFirst => vec![s(&g, -0.9), s(&w, -0.9), s("The", -1.5), s(&other, -2.5), s(":", -3.5)],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedTask {
    pub name: String,
    pub questions: Vec<ScriptedQuestion>,
}

impl ScriptedTask {
    pub fn new(name: impl Into<String>, n: usize) -> Self {
        let name = name.into();
        let questions = (0..n)
            .map(|i| {
                let gold = (i / 10 + i) % 4;
                let scenario = Scenario::for_index(i);
                ScriptedQuestion { id: format!("{name}-q{i:04}"), gold, scenario, script: script_for(i, gold, scenario) }
            })
            .collect();
        Self { name, questions }
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn expected_correct(&self) -> usize {
        self.questions.iter().filter(|q| q.scenario.expect_correct()).count()
    }

    pub fn expected_no_valid(&self) -> usize {
        self.questions.iter().filter(|q| q.scenario == Scenario::NoValid).count()
    }

    pub fn invalid_modal(&self) -> usize {
        self.questions.iter().filter(|q| q.scenario.modal_is_invalid()).count()
    }

    /// Percent correct over all questions (nothing in this task is skipped).
    pub fn expected_accuracy(&self) -> f64 {
        100.0 * self.expected_correct() as f64 / self.len() as f64
    }

    /// Ids of questions scripted to be answered incorrectly, sorted.
    pub fn expected_failures(&self) -> Vec<String> {
        let mut v: Vec<String> =
            self.questions.iter().filter(|q| !q.scenario.expect_correct()).map(|q| q.id.clone()).collect();
        v.sort();
        v
    }

    pub fn scripts(&self) -> HashMap<String, Script> {
        self.questions.iter().map(|q| (q.id.clone(), q.script.clone())).collect()
    }

    pub fn yaml(&self) -> String {
        format!(
            "task: {name}\n\
             dataset_path: {name}\n\
             test_split: test\n\
             doc_to_text: \"{{{{question.strip()}}}}\\nA. {{{{choices[0]}}}}\\nB. {{{{choices[1]}}}}\\nC. {{{{choices[2]}}}}\\nD. {{{{choices[3]}}}}\\nAnswer:\"\n\
             doc_to_choice: [\"A\", \"B\", \"C\", \"D\"]\n\
             doc_to_target: answer\n\
             metadata:\n  - version: \"0.0.1\"\n",
            name = self.name
        )
    }

    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, q) in self.questions.iter().enumerate() {
            let line = json!({
                "id": q.id,
                "question": format!("qid:{} Which option is correct for item {i}?", q.id),
                "choices": (0..4).map(|c| format!("option {c} for item {i}")).collect::<Vec<_>>(),
                "answer": q.gold,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Writes `<tasks_dir>/<name>.yaml` and `<data_dir>/<name>/test.jsonl`.
    pub fn write_to(&self, tasks_dir: &Path, data_dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(tasks_dir)?;
        let ds = data_dir.join(&self.name);
        std::fs::create_dir_all(&ds)?;
        std::fs::write(tasks_dir.join(format!("{}.yaml", self.name)), self.yaml())?;
        std::fs::write(ds.join("test.jsonl"), self.records_jsonl())
    }
}

/// Scripts for several tasks merged into one map for a single server.
pub fn merged_scripts<'a>(tasks: impl IntoIterator<Item = &'a ScriptedTask>) -> HashMap<String, Script> {
    tasks.into_iter().flat_map(ScriptedTask::scripts).collect()
}
