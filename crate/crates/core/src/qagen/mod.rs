//! Synthetic instruction-tuning data from a raw text corpus.
//!
//! A corpus is optionally preprocessed, split into chunks, and every chunk is
//! run through each selected category. Prompt-driven categories use a
//! generate/judge/retry loop; completion splits the chunk with no model call.

mod category;
mod generate;
mod text;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use category::{chunk_rng, Category, CategoryRegistry, CompletionCategory, LlmCategory, PromptSet, LLM_CATEGORIES};
pub use generate::{
    completion_prefix, generate_qa, generator_messages, judge_messages, make_completion_example, parse_qa, parse_score,
    split_point, GenContext, QAPair, QaOutcome, UnsuitableMark, COMPLETION_FRACTIONS, DEFAULT_THRESHOLD, MAX_ATTEMPTS,
    UNSUITABLE_LABEL,
};
pub use text::{chunk_corpus, preprocess_corpus, Chunk, DEFAULT_CHUNK_CHARS, MIN_CHUNK_CHARS};

pub const COMPLETION: &str = "completion";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QagenError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("chunk `{chunk_id}` has {len} characters; completion needs at least 4")]
    ChunkTooShort { chunk_id: String, len: usize },
    #[error("io error at {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    BadInput { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QagenConfig {
    pub chunk_chars: usize,
    pub threshold: u8,
    pub max_attempts: u32,
    /// Chunks in flight at once; categories within a chunk run in sequence.
    pub concurrency: usize,
    pub seed: u64,
    pub preprocess: bool,
}

impl Default for QagenConfig {
    fn default() -> Self {
        Self {
            chunk_chars: DEFAULT_CHUNK_CHARS,
            threshold: DEFAULT_THRESHOLD,
            max_attempts: MAX_ATTEMPTS,
            concurrency: 4,
            seed: 0,
            preprocess: false,
        }
    }
}

impl QagenConfig {
    pub fn validate(&self) -> Result<(), QagenError> {
        if self.chunk_chars < MIN_CHUNK_CHARS {
            return Err(QagenError::BadConfig(format!("chunk_chars must be at least {MIN_CHUNK_CHARS}")));
        }
        if !(1..=10).contains(&self.threshold) {
            return Err(QagenError::BadConfig("threshold must be in 1..=10".into()));
        }
        if !(1..=MAX_ATTEMPTS).contains(&self.max_attempts) {
            return Err(QagenError::BadConfig(format!("max_attempts must be in 1..={MAX_ATTEMPTS}")));
        }
        if self.concurrency == 0 {
            return Err(QagenError::BadConfig("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

/// A (chunk, category) that produced nothing for a reason other than the
/// judge loop, e.g. a chunk too short to split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub chunk_id: String,
    pub category: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub documents: usize,
    pub chunks: usize,
    pub pairs: usize,
    pub unsuitable: Vec<UnsuitableMark>,
    pub skipped: Vec<SkippedItem>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    /// Accepted pairs in (chunk, category) order, before any shuffle.
    pub pairs: Vec<QAPair>,
    pub manifest: Manifest,
}

/// (category, outcome) for each category run on one chunk.
type PerChunk = Vec<(String, Result<QaOutcome, QagenError>)>;

/// Runs every selected category over every chunk of every document.
pub async fn run_pipeline(
    docs: &[(String, String)],
    categories: &[Arc<dyn Category>],
    ctx: &GenContext,
    cfg: &QagenConfig,
) -> Result<PipelineOutput, QagenError> {
    cfg.validate()?;
    let mut chunks = Vec::new();
    for (name, body) in docs {
        let body = if cfg.preprocess { preprocess_corpus(body) } else { body.clone() };
        chunks.extend(chunk_corpus(name, &body, cfg.chunk_chars)?);
    }

    let mut results: Vec<(usize, PerChunk)> = stream::iter(chunks.iter().enumerate())
        .map(|(i, chunk)| async move {
            let mut out = Vec::with_capacity(categories.len());
            for cat in categories {
                out.push((cat.name().to_string(), cat.produce(ctx, chunk, cfg.seed).await));
            }
            (i, out)
        })
        .buffer_unordered(cfg.concurrency)
        .collect()
        .await;
    results.sort_by_key(|(i, _)| *i);

    let mut output = PipelineOutput::default();
    output.manifest.documents = docs.len();
    output.manifest.chunks = chunks.len();
    for (i, per_cat) in results {
        for (category, r) in per_cat {
            match r {
                Ok(QaOutcome::Pair(p)) => output.pairs.push(p),
                Ok(QaOutcome::Unsuitable(m)) => output.manifest.unsuitable.push(m),
                Err(e) => output.manifest.skipped.push(SkippedItem {
                    chunk_id: chunks[i].id.clone(),
                    category,
                    reason: e.to_string(),
                }),
            }
        }
    }
    output.manifest.pairs = output.pairs.len();
    Ok(output)
}

/// Generated and external pairs shuffled together; the order depends only on
/// the inputs and `seed`.
pub fn build_dataset(pairs: Vec<QAPair>, external: Vec<QAPair>, seed: u64) -> Vec<QAPair> {
    let mut all = pairs;
    all.extend(external);
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all
}

/// Every regular file directly inside `dir`, sorted by file name, as
/// (stem, contents).
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<(String, String)>, QagenError> {
    let io = |e: std::io::Error| QagenError::Io { path: dir.to_path_buf(), reason: e.to_string() };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text =
                std::fs::read_to_string(&p).map_err(|e| QagenError::Io { path: p.clone(), reason: e.to_string() })?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, text))
        })
        .collect()
}

/// Reads `{"question", "answer", ...}` lines.
pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<QAPair>, QagenError> {
    let text = std::fs::read_to_string(path).map_err(|e| QagenError::Io { path: path.to_path_buf(), reason: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| QagenError::BadInput { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })
        })
        .collect()
}

/// Output line shape: question, answer, category, chunk_id, judge_score.
#[derive(Serialize)]
struct OutputLine<'a> {
    question: &'a str,
    answer: &'a str,
    category: &'a str,
    chunk_id: &'a str,
    judge_score: Option<u8>,
}

pub fn pair_to_json_line(p: &QAPair) -> String {
    serde_json::to_string(&OutputLine {
        question: &p.question,
        answer: &p.answer,
        category: &p.category,
        chunk_id: &p.chunk_id,
        judge_score: p.judge_score,
    })
    .expect("pair serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(q: &str) -> QAPair {
        QAPair {
            question: q.into(),
            answer: "a".into(),
            category: "summarization".into(),
            chunk_id: "c#0".into(),
            attempts_used: 1,
            judge_score: Some(9),
        }
    }

    #[test]
    fn build_dataset_is_seeded_permutation() {
        let gen: Vec<_> = ["g1", "g2", "g3"].map(pair).to_vec();
        let ext: Vec<_> = ["e1", "e2"].map(pair).to_vec();
        let a = build_dataset(gen.clone(), ext.clone(), 7);
        assert_eq!(a, build_dataset(gen.clone(), ext.clone(), 7));
        let mut qs: Vec<_> = a.iter().map(|p| p.question.clone()).collect();
        qs.sort();
        assert_eq!(qs, ["e1", "e2", "g1", "g2", "g3"]);
        assert_eq!(build_dataset(vec![], ext.clone(), 3).len(), 2);
        assert_eq!(build_dataset(gen, vec![], 3).len(), 3);
    }

    #[test]
    fn external_pairs_need_only_question_and_answer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.jsonl");
        std::fs::write(&path, "{\"question\":\"q\",\"answer\":\"a\"}\n\n").unwrap();
        let pairs = read_pairs_jsonl(&path).unwrap();
        assert_eq!(pairs[0].category, "external");
        assert_eq!(pairs[0].judge_score, None);
        assert_eq!(
            pair_to_json_line(&pairs[0]),
            r#"{"question":"q","answer":"a","category":"external","chunk_id":"","judge_score":null}"#
        );
    }

    #[test]
    fn config_bounds() {
        assert!(QagenConfig::default().validate().is_ok());
        assert!(QagenConfig { max_attempts: 11, ..Default::default() }.validate().is_err());
        assert!(QagenConfig { threshold: 0, ..Default::default() }.validate().is_err());
        assert!(QagenConfig { chunk_chars: 100, ..Default::default() }.validate().is_err());
    }
}
