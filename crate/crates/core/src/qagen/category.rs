use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::generate::{generate_qa, make_completion_example, GenContext, QaOutcome, COMPLETION_FRACTIONS};
use super::text::Chunk;
use super::{QagenError, COMPLETION};

pub const LLM_CATEGORIES: [&str; 5] = [
    "summarization",
    "domain_vocabulary",
    "natural_language_inference",
    "commonsense_reasoning",
    "paraphrase_detection",
];

const BUILTIN: [(&str, &str); 8] = [
    ("guidelines", include_str!("../../assets/prompts/guidelines.txt")),
    ("judge", include_str!("../../assets/prompts/judge.txt")),
    ("completion_questions", include_str!("../../assets/prompts/completion_questions.txt")),
    ("summarization", include_str!("../../assets/prompts/summarization.txt")),
    ("domain_vocabulary", include_str!("../../assets/prompts/domain_vocabulary.txt")),
    ("natural_language_inference", include_str!("../../assets/prompts/natural_language_inference.txt")),
    ("commonsense_reasoning", include_str!("../../assets/prompts/commonsense_reasoning.txt")),
    ("paraphrase_detection", include_str!("../../assets/prompts/paraphrase_detection.txt")),
];

/// Prompt text for every category plus the shared blocks. Each entry maps to
/// `<name>.txt` in a prompts directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    texts: BTreeMap<String, String>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self { texts: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.trim_end_matches('\n').to_string())).collect() }
    }

    /// Builtins, overridden by any `<name>.txt` present in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, QagenError> {
        if !dir.is_dir() {
            return Err(QagenError::BadConfig(format!("prompts dir {} does not exist", dir.display())));
        }
        let mut set = Self::builtin();
        for name in BUILTIN.map(|(k, _)| k) {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| QagenError::Io { path: path.clone(), reason: e.to_string() })?;
                set.texts.insert(name.to_string(), text.trim_end_matches('\n').to_string());
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.texts.get(name).map(String::as_str)
    }

    pub fn guidelines(&self) -> &str {
        &self.texts["guidelines"]
    }

    pub fn judge(&self) -> &str {
        &self.texts["judge"]
    }

    pub fn completion_pool(&self) -> Vec<String> {
        self.texts["completion_questions"].lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    }
}

#[async_trait]
pub trait Category: Send + Sync {
    fn name(&self) -> &str;

    /// False for categories that build examples without any model call.
    fn uses_llm(&self) -> bool;

    /// `seed` is the job seed; implementations needing randomness derive a
    /// per-chunk stream from it so results do not depend on scheduling.
    async fn produce(&self, ctx: &GenContext, chunk: &Chunk, seed: u64) -> Result<QaOutcome, QagenError>;
}

pub struct LlmCategory {
    name: String,
    guidelines: Arc<str>,
    prompt: String,
}

impl LlmCategory {
    pub fn new(name: impl Into<String>, guidelines: Arc<str>, prompt: impl Into<String>) -> Self {
        Self { name: name.into(), guidelines, prompt: prompt.into() }
    }
}

#[async_trait]
impl Category for LlmCategory {
    fn name(&self) -> &str {
        &self.name
    }

    fn uses_llm(&self) -> bool {
        true
    }

    async fn produce(&self, ctx: &GenContext, chunk: &Chunk, _seed: u64) -> Result<QaOutcome, QagenError> {
        Ok(generate_qa(ctx, chunk, &self.name, &self.guidelines, &self.prompt).await)
    }
}

pub struct CompletionCategory {
    pool: Vec<String>,
}

impl CompletionCategory {
    pub fn new(pool: Vec<String>) -> Self {
        Self { pool }
    }
}

/// Deterministic rng for one (seed, chunk, category) triple.
pub fn chunk_rng(seed: u64, chunk_id: &str, category: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(chunk_id.as_bytes());
    h.update([0]);
    h.update(category.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[async_trait]
impl Category for CompletionCategory {
    fn name(&self) -> &str {
        COMPLETION
    }

    fn uses_llm(&self) -> bool {
        false
    }

    async fn produce(&self, _ctx: &GenContext, chunk: &Chunk, seed: u64) -> Result<QaOutcome, QagenError> {
        let mut rng = chunk_rng(seed, &chunk.id, COMPLETION);
        let fraction = *COMPLETION_FRACTIONS.choose(&mut rng).expect("non-empty");
        make_completion_example(chunk, fraction, &self.pool, &mut rng).map(QaOutcome::Pair)
    }
}

/// Named categories in registration order.
#[derive(Clone, Default)]
pub struct CategoryRegistry {
    entries: Vec<Arc<dyn Category>>,
}

impl CategoryRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The five prompt-driven categories plus completion.
    pub fn from_prompts(prompts: &PromptSet) -> Self {
        let guidelines: Arc<str> = Arc::from(prompts.guidelines());
        let mut r = Self::empty();
        for name in LLM_CATEGORIES {
            let prompt = prompts.get(name).expect("every builtin category has a prompt");
            r.register(Arc::new(LlmCategory::new(name, guidelines.clone(), prompt)));
        }
        r.register(Arc::new(CompletionCategory::new(prompts.completion_pool())));
        r
    }

    /// Replaces any existing category with the same name.
    pub fn register(&mut self, category: Arc<dyn Category>) {
        match self.entries.iter_mut().find(|c| c.name() == category.name()) {
            Some(slot) => *slot = category,
            None => self.entries.push(category),
        }
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn Category>> {
        self.entries.iter().find(|c| c.name() == name).cloned()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|c| c.name()).collect()
    }

    /// Looks up each requested name, in the order given.
    pub fn select(&self, names: &[String]) -> Result<Vec<Arc<dyn Category>>, QagenError> {
        names.iter().map(|n| self.get(n).ok_or_else(|| QagenError::UnknownCategory(n.clone()))).collect()
    }

    pub fn all(&self) -> Vec<Arc<dyn Category>> {
        self.entries.clone()
    }
}

impl std::fmt::Debug for CategoryRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}
