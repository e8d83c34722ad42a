use rand::Rng;
use serde::{Deserialize, Serialize};

use super::text::Chunk;
use super::QagenError;
use crate::client::{ChatMessage, EndpointConfig, InferenceClient};

pub const MAX_ATTEMPTS: u32 = 10;
pub const DEFAULT_THRESHOLD: u8 = 8;
pub const UNSUITABLE_LABEL: &str = "<unsuitable for conversion>";
pub const COMPLETION_FRACTIONS: [f64; 3] = [0.25, 0.50, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    #[serde(default = "external_category")]
    pub category: String,
    #[serde(default)]
    pub chunk_id: String,
    #[serde(default)]
    pub attempts_used: u32,
    /// None for pairs that never went through the judge (completion, external).
    #[serde(default)]
    pub judge_score: Option<u8>,
}

fn external_category() -> String {
    "external".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnsuitableMark {
    pub chunk_id: String,
    pub category: String,
    pub label: String,
    pub attempts: u32,
    /// Why the last attempt failed.
    pub last_failure: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum QaOutcome {
    Pair(QAPair),
    Unsuitable(UnsuitableMark),
}

/// Endpoints and knobs shared by every generate/judge loop in a job.
#[derive(Debug, Clone)]
pub struct GenContext {
    pub client: InferenceClient,
    pub generator: EndpointConfig,
    pub judge: EndpointConfig,
    pub judge_prompt: String,
    pub threshold: u8,
    pub max_attempts: u32,
}

const Q_MARKERS: [&str; 2] = ["((Q)):", "Q:"];
const A_MARKERS: [&str; 2] = ["((A)):", "A:"];

fn strip_marker<'a>(line: &'a str, markers: &[&str]) -> Option<&'a str> {
    let t = line.trim_start();
    markers.iter().find_map(|m| t.strip_prefix(m)).map(str::trim)
}

/// Pulls exactly one question and one answer out of a generator reply.
/// Lines after a marker line continue that field until the next marker.
pub fn parse_qa(reply: &str) -> Option<(String, String)> {
    let mut q: Option<Vec<&str>> = None;
    let mut a: Option<Vec<&str>> = None;
    for line in reply.lines() {
        if let Some(rest) = strip_marker(line, &Q_MARKERS) {
            if q.is_some() || a.is_some() {
                return None;
            }
            q = Some(vec![rest]);
        } else if let Some(rest) = strip_marker(line, &A_MARKERS) {
            if q.is_none() || a.is_some() {
                return None;
            }
            a = Some(vec![rest]);
        } else if let Some(field) = a.as_mut().or(q.as_mut()) {
            field.push(line);
        }
    }
    let join = |v: Vec<&str>| v.join("\n").trim().to_string();
    let (q, a) = (join(q?), join(a?));
    (!q.is_empty() && !a.is_empty()).then_some((q, a))
}

/// First integer in the judge reply, if it lies in 1..=10.
pub fn parse_score(reply: &str) -> Option<u8> {
    let start = reply.find(|c: char| c.is_ascii_digit())?;
    let digits: String = reply[start..].chars().take_while(char::is_ascii_digit).collect();
    let n: u32 = digits.parse().ok()?;
    (1..=10).contains(&n).then_some(n as u8)
}

pub fn generator_messages(guidelines: &str, category_prompt: &str, chunk: &Chunk) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(guidelines),
        ChatMessage::user(format!("{category_prompt}\n\n### INPUT\n[{}]\n\n### OUTPUT\n", chunk.text)),
    ]
}

pub fn judge_messages(judge_prompt: &str, chunk: &Chunk, question: &str, answer: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(judge_prompt),
        ChatMessage::user(format!("### SOURCE TEXT\n[{}]\n\n### QUESTION\n{question}\n\n### ANSWER\n{answer}\n\n### SCORE\n", chunk.text)),
    ]
}

/// The generate, parse, judge loop for one (chunk, category). Each attempt is
/// one generator call and, if the reply parses, one judge call. Never errors:
/// exhausting the attempts yields an unsuitable mark.
pub async fn generate_qa(
    ctx: &GenContext,
    chunk: &Chunk,
    category: &str,
    guidelines: &str,
    category_prompt: &str,
) -> QaOutcome {
    let mut last_failure = String::from("no attempts made");
    for attempt in 1..=ctx.max_attempts {
        let reply = match ctx.client.chat_complete(&ctx.generator, &generator_messages(guidelines, category_prompt, chunk)).await {
            Ok(m) => m.content,
            Err(e) => {
                last_failure = format!("generator: {e}");
                tracing::debug!(chunk = %chunk.id, category, attempt, "{last_failure}");
                continue;
            }
        };
        let Some((question, answer)) = parse_qa(&reply) else {
            last_failure = "generator reply had no parseable Q/A pair".into();
            continue;
        };
        let verdict = match ctx.client.chat_complete(&ctx.judge, &judge_messages(&ctx.judge_prompt, chunk, &question, &answer)).await {
            Ok(m) => m.content,
            Err(e) => {
                last_failure = format!("judge: {e}");
                continue;
            }
        };
        match parse_score(&verdict) {
            Some(score) if score >= ctx.threshold => {
                return QaOutcome::Pair(QAPair {
                    question,
                    answer,
                    category: category.to_string(),
                    chunk_id: chunk.id.clone(),
                    attempts_used: attempt,
                    judge_score: Some(score),
                });
            }
            Some(score) => last_failure = format!("judge score {score} below threshold {}", ctx.threshold),
            None => last_failure = format!("unparseable judge reply {:?}", truncate(&verdict, 80)),
        }
    }
    QaOutcome::Unsuitable(UnsuitableMark {
        chunk_id: chunk.id.clone(),
        category: category.to_string(),
        label: UNSUITABLE_LABEL.to_string(),
        attempts: ctx.max_attempts,
        last_failure,
    })
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Character index where a chunk of `len` characters is split.
pub fn split_point(len: usize, fraction: f64) -> usize {
    (len as f64 * fraction).floor() as usize
}

/// Split-and-ask example: no model call involved.
pub fn make_completion_example(
    chunk: &Chunk,
    fraction: f64,
    question_pool: &[String],
    rng: &mut impl Rng,
) -> Result<QAPair, QagenError> {
    let chars: Vec<char> = chunk.text.chars().collect();
    if chars.len() < 4 {
        return Err(QagenError::ChunkTooShort { chunk_id: chunk.id.clone(), len: chars.len() });
    }
    if question_pool.is_empty() {
        return Err(QagenError::BadConfig("completion question pool is empty".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(QagenError::BadConfig(format!("fraction {fraction} outside [0, 1]")));
    }
    let cut = split_point(chars.len(), fraction);
    let prefix: String = chars[..cut].iter().collect();
    let suffix: String = chars[cut..].iter().collect();
    let q = &question_pool[rng.random_range(0..question_pool.len())];
    Ok(QAPair {
        question: format!("{q}\n### INPUT\n{prefix}"),
        answer: suffix,
        category: super::COMPLETION.to_string(),
        chunk_id: chunk.id.clone(),
        attempts_used: 1,
        judge_score: None,
    })
}

/// The chunk prefix embedded in a completion question.
pub fn completion_prefix(question: &str) -> Option<&str> {
    question.split_once("\n### INPUT\n").map(|(_, p)| p)
}
