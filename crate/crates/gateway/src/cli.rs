//! The `proctor` command line. Each subcommand returns an exit code or a
//! [`CliError`] that `main` prints to stderr as one JSON line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufReader, Write as _};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use proctor_core::client::{EndpointConfig, InferenceClient, ENV_API_KEY};
use proctor_core::curation::{self, CurationConfig};
use proctor_core::dataset::{load_for_task, validate_against_task};
use proctor_core::evaluator::{CancelFlag, DataRoot, Evaluator, DEFAULT_K};
use proctor_core::qagen::{self, CategoryRegistry, GenContext, PromptSet, QagenConfig};
use proctor_core::store::{ModelKind, NewRun, RunRecord, RunStatus, RunStore};
use proctor_core::taskdef::TaskCatalog;
use serde_json::json;

use crate::{build_job, AppState};

#[derive(Debug, Parser)]
#[command(name = "proctor", version, about = "Multiple-choice evaluation, corpus curation and Q&A generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score a model endpoint on one or more tasks.
    Evaluate(EvaluateArgs),
    /// Pick a topic-balanced subset of a labelled corpus.
    Curate(CurateArgs),
    /// Generate instruction-tuning pairs from a text corpus.
    GenerateQa(GenerateArgs),
    /// Run the HTTP gateway.
    Serve(ServeArgs),
    /// Check task definitions and their datasets.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    Base,
    FineTuned,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Base => ModelKind::Base,
            Kind::FineTuned => ModelKind::FineTuned,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub model: String,
    /// Comma separated task names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<String>,
    #[arg(long, env = "PROCTOR_DEFAULT_K", default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
    /// Run store directory.
    #[arg(long, env = "PROCTOR_STORE", default_value = "proctor-store")]
    pub out: PathBuf,
    #[arg(long, env = "PROCTOR_TASKS", default_value = "tasks")]
    pub tasks_dir: PathBuf,
    #[arg(long, env = "PROCTOR_DATA", default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "fine-tuned")]
    pub model_kind: Kind,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub set_size: usize,
    #[arg(long, default_value_t = 10)]
    pub underscore_run: usize,
    /// Reject records with characters above code point 127 (the default).
    #[arg(long, conflicts_with = "allow_non_ascii")]
    pub ascii_only: bool,
    /// Keep records containing characters above code point 127.
    #[arg(long)]
    pub allow_non_ascii: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Directory of plain-text documents.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma separated; defaults to every category.
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,
    #[arg(long)]
    pub gen_endpoint: String,
    #[arg(long)]
    pub judge_endpoint: String,
    #[arg(long, default_value = "generator")]
    pub gen_model: String,
    #[arg(long, default_value = "judge")]
    pub judge_model: String,
    #[arg(long, default_value_t = qagen::DEFAULT_THRESHOLD)]
    pub threshold: u8,
    #[arg(long, default_value_t = qagen::DEFAULT_CHUNK_CHARS)]
    pub chunk_chars: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Lowercase and collapse whitespace before chunking.
    #[arg(long)]
    pub preprocess: bool,
    /// Existing pairs (JSONL) to mix into the output.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Directory overriding the built-in prompt files.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Where to write the manifest; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PROCTOR_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, env = "PROCTOR_STORE", default_value = "proctor-store")]
    pub store: PathBuf,
    #[arg(long, env = "PROCTOR_TASKS", default_value = "tasks")]
    pub tasks: PathBuf,
    #[arg(long, env = "PROCTOR_DATA", default_value = "data")]
    pub data: PathBuf,
    #[arg(long, env = "PROCTOR_DEFAULT_K", default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Directory of static web assets served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long, env = "PROCTOR_TASKS", default_value = "tasks")]
    pub tasks: PathBuf,
    #[arg(long, env = "PROCTOR_DATA", default_value = "data")]
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl ToString) -> Self {
        Self { code: code.into(), message: message.to_string() }
    }

    pub fn to_json_line(&self) -> String {
        json!({ "error": self.code, "message": self.message }).to_string()
    }
}

impl From<crate::ApiError> for CliError {
    fn from(e: crate::ApiError) -> Self {
        Self::new(e.code.as_str(), e.message)
    }
}

pub async fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Evaluate(a) => evaluate(a).await,
        Command::Curate(a) => curate(a),
        Command::GenerateQa(a) => generate_qa(a).await,
        Command::Serve(a) => serve(a).await,
        Command::Validate(a) => validate(a),
    }
}

fn load_catalog(dir: &Path) -> Result<TaskCatalog, CliError> {
    TaskCatalog::load_dir(dir).map_err(|e| CliError::new("bad_task_config", e))
}

fn api_key() -> Option<String> {
    std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty())
}

/// Per-task table plus the average line.
pub fn format_scores(run: &RunRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<28} {:>7} {:>7} {:>9} {:>7} {:>9}", "task", "total", "correct", "no_valid", "skipped", "accuracy");
    for task in &run.tasks {
        match run.task_scores.get(task) {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "{:<28} {:>7} {:>7} {:>9} {:>7} {:>9}",
                    task,
                    s.total,
                    s.correct_count,
                    s.no_valid_response,
                    s.skipped,
                    s.accuracy_display.as_deref().unwrap_or("n/a")
                );
            }
            None => {
                let _ = writeln!(out, "{task:<28} {:>7} {:>7} {:>9} {:>7} {:>9}", "-", "-", "-", "-", "n/a");
            }
        }
    }
    match run.average {
        Some(avg) => {
            let _ = writeln!(out, "average: {avg:.2}");
        }
        None => {
            let _ = writeln!(out, "average: n/a");
        }
    }
    out
}

async fn evaluate(a: EvaluateArgs) -> Result<i32, CliError> {
    let catalog = load_catalog(&a.tasks_dir)?;
    let endpoint = EndpointConfig::new(&a.endpoint, &a.model).with_api_key(api_key());
    build_job(&catalog, "pending", endpoint.clone(), &a.tasks, a.k, a.concurrency)?;
    let store = RunStore::open(&a.out).map_err(|e| CliError::new("storage_failure", e))?;
    let run = store
        .create_run(NewRun {
            run_id: a.run_id,
            model_name: a.model.clone(),
            endpoint_url: a.endpoint.clone(),
            model_kind: a.model_kind.into(),
            tasks: a.tasks.clone(),
            k: a.k,
            concurrency: a.concurrency,
        })
        .map_err(|e| CliError::from(crate::ApiError::from(e)))?;
    let job = build_job(&catalog, &run.run_id, endpoint, &a.tasks, a.k, a.concurrency)?;

    let cancel = CancelFlag::new();
    let on_signal = cancel.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            on_signal.cancel();
        }
    });
    eprintln!("run {} started", run.run_id);
    let result = Evaluator::default()
        .evaluate_run(&job, &store, &DataRoot(a.data.clone()), &cancel)
        .await
        .map_err(|e| CliError::new(e.code(), e))?;
    print!("{}", format_scores(&result));
    println!("run: {}", result.run_id);
    if result.status == RunStatus::Completed {
        Ok(0)
    } else {
        let status = serde_json::to_value(result.status).unwrap_or_default();
        let msg = result.error.clone().unwrap_or_else(|| format!("run ended {}", status.as_str().unwrap_or("?")));
        eprintln!("{}", json!({ "error": format!("run_{}", status.as_str().unwrap_or("failed")), "message": msg }));
        Ok(1)
    }
}

fn curate(a: CurateArgs) -> Result<i32, CliError> {
    let cfg = CurationConfig { set_size: a.set_size, min_underscore_run: a.underscore_run, ascii_only: !a.allow_non_ascii };
    cfg.validate().map_err(|e| CliError::new("invalid_request", e))?;
    let file = std::fs::File::open(&a.input).map_err(|e| CliError::new("io_error", format!("{}: {e}", a.input.display())))?;
    let (topics, labels) = curation::read_jsonl(BufReader::new(file)).map_err(|e| CliError::new("bad_input", e))?;
    topics.check_unique_ids().map_err(|e| CliError::new("bad_input", e))?;
    let available = topics.len();
    let selection = curation::select_records(topics, &cfg);
    let out = std::fs::File::create(&a.out).map_err(|e| CliError::new("io_error", format!("{}: {e}", a.out.display())))?;
    let mut w = std::io::BufWriter::new(out);
    curation::write_jsonl(&mut w, &selection).map_err(|e| CliError::new("io_error", e))?;
    w.flush().map_err(|e| CliError::new("io_error", e))?;
    let report = curation::curation_report(&selection);
    print!("{}", report.to_table(&labels));
    if report.total < cfg.set_size {
        eprintln!("selected {} of {} requested ({} records available)", report.total, cfg.set_size, available);
    }
    Ok(0)
}

async fn generate_qa(a: GenerateArgs) -> Result<i32, CliError> {
    let bad = |e: qagen::QagenError| CliError::new("invalid_request", e);
    let prompts = match &a.prompts {
        Some(dir) => PromptSet::from_dir(dir).map_err(bad)?,
        None => PromptSet::builtin(),
    };
    let registry = CategoryRegistry::from_prompts(&prompts);
    let categories = if a.categories.is_empty() { registry.all() } else { registry.select(&a.categories).map_err(bad)? };
    let cfg = QagenConfig {
        chunk_chars: a.chunk_chars,
        threshold: a.threshold,
        concurrency: a.concurrency,
        seed: a.seed,
        preprocess: a.preprocess,
        ..QagenConfig::default()
    };
    cfg.validate().map_err(bad)?;
    let generator = EndpointConfig::new(&a.gen_endpoint, &a.gen_model).with_api_key(api_key());
    let judge = EndpointConfig::new(&a.judge_endpoint, &a.judge_model).with_api_key(api_key());
    for ep in [&generator, &judge] {
        ep.validate().map_err(|e| CliError::new("invalid_request", e))?;
    }
    let docs = qagen::read_corpus_dir(&a.corpus).map_err(|e| CliError::new("io_error", e))?;
    let external = match &a.external {
        Some(p) => qagen::read_pairs_jsonl(p).map_err(|e| CliError::new("bad_input", e))?,
        None => Vec::new(),
    };
    let ctx = GenContext {
        client: InferenceClient::new(),
        generator,
        judge,
        judge_prompt: prompts.judge().to_string(),
        threshold: cfg.threshold,
        max_attempts: cfg.max_attempts,
    };
    let output = qagen::run_pipeline(&docs, &categories, &ctx, &cfg).await.map_err(bad)?;
    let external_count = external.len();
    let dataset = qagen::build_dataset(output.pairs, external, cfg.seed);

    let mut body = String::new();
    for p in &dataset {
        body.push_str(&qagen::pair_to_json_line(p));
        body.push('\n');
    }
    std::fs::write(&a.out, body).map_err(|e| CliError::new("io_error", format!("{}: {e}", a.out.display())))?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    });
    let manifest = serde_json::to_string_pretty(&output.manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| CliError::new("io_error", format!("{}: {e}", manifest_path.display())))?;

    let mut per_cat: BTreeMap<&str, usize> = BTreeMap::new();
    for p in dataset.iter() {
        *per_cat.entry(p.category.as_str()).or_default() += 1;
    }
    println!("documents: {}", output.manifest.documents);
    println!("chunks: {}", output.manifest.chunks);
    for (cat, n) in &per_cat {
        println!("{cat}: {n}");
    }
    println!("unsuitable: {}", output.manifest.unsuitable.len());
    println!("skipped: {}", output.manifest.skipped.len());
    println!("external: {external_count}");
    println!("total: {}", dataset.len());
    Ok(0)
}

async fn serve(a: ServeArgs) -> Result<i32, CliError> {
    let catalog = load_catalog(&a.tasks)?;
    let store = RunStore::open(&a.store).map_err(|e| CliError::new("storage_failure", e))?;
    let state = Arc::new(AppState::new(store, catalog, a.data.clone()).with_default_k(a.k));
    let listener = crate::bind(a.addr).await.map_err(|e| CliError::new(e.code(), e.message()))?;
    let local = listener.local_addr().map_err(|e| CliError::new("bind_failed", e))?;
    eprintln!("listening on http://{local}");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    crate::serve(listener, state, a.static_dir, shutdown).await.map_err(|e| CliError::new(e.code(), e.message()))?;
    Ok(0)
}

fn validate(a: ValidateArgs) -> Result<i32, CliError> {
    let catalog = load_catalog(&a.tasks)?;
    if catalog.is_empty() {
        return Err(CliError::new("bad_task_config", format!("no task definitions in {}", a.tasks.display())));
    }
    let mut failed = false;
    for task in catalog.iter() {
        match load_for_task(&a.data, task) {
            Err(e) => {
                failed = true;
                println!("{}: error: {e}", task.task);
            }
            Ok(ds) => {
                let report = validate_against_task(&ds, task);
                let n = ds.split(&task.test_split).map(|s| s.len()).unwrap_or(0);
                if report.defects.is_empty() {
                    println!("{}: ok ({n} test records)", task.task);
                } else {
                    failed = true;
                    println!("{}: {} defect(s) in {n} test records", task.task, report.defects.len());
                    for d in &report.defects {
                        println!("  {}", serde_json::to_string(d).expect("defect serializes"));
                    }
                }
            }
        }
    }
    Ok(if failed { 1 } else { 0 })
}
