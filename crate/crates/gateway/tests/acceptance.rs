//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use common::*;
use futures::FutureExt;
use proctor_core::client::{EndpointConfig, InferenceClient};
use proctor_core::curation::{curation_report, is_clean, select_records, text_is_clean, CurationConfig, RawRecord, TopicMap};
use proctor_core::dataset::{load_for_task, Dataset, Record};
use proctor_core::evaluator::{
    aggregate_average, CancelFlag, DataRoot, EvalJob, Evaluator, MemorySink, QuestionVerdict, TaskOutcome, TaskScore,
    VerdictSink,
};
use proctor_core::qagen::{
    chunk_corpus, completion_prefix, make_completion_example, run_pipeline, CategoryRegistry, GenContext, PromptSet,
    QagenConfig, COMPLETION, COMPLETION_FRACTIONS, LLM_CATEGORIES, UNSUITABLE_LABEL,
};
use proctor_core::store::{average_of, AuditFilter, ModelKind, NewRun, RunStatus, RunStore, StoreError};
use proctor_core::taskdef::{build_prompt_instance, parse_task_config, FewShotSampler, FirstN, TaskCatalog, TaskConfig};
use proctor_mock::fixture::ScriptedTask;
use proctor_mock::{MockConfig, MockServer};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Check = (u32, &'static str, std::pin::Pin<Box<dyn std::future::Future<Output = Outcome>>>);
type Selection = (Vec<(i64, String)>, Vec<(i64, usize)>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const CHILD_ENV: &str = "PROCTOR_ACCEPTANCE_CHILD";

fn main() {
    if let Ok(spec) = std::env::var(CHILD_ENV) {
        restart_child(&spec);
        return;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
    let checks: Vec<Check> = vec![
        (1, "published averages from per-task scores", Box::pin(c1_averages())),
        (2, "filtered top-k scoring on 200 scripted questions", Box::pin(c2_scripted_task())),
        (3, "concurrency 1 vs 32 gives identical results", Box::pin(c3_concurrency())),
        (4, "MMLU task definition golden prompt", Box::pin(c4_golden())),
        (5, "round-robin selection matches naive oracle", Box::pin(c5_curation())),
        (6, "cleaning rule properties", Box::pin(c6_cleaning())),
        (7, "Q&A generation control flow", Box::pin(c7_qagen())),
        (8, "store consistency and crash safety", Box::pin(c8_store())),
        (9, "REST and CLI contract", Box::pin(c9_api())),
    ];
    let mut failed = 0;
    for (n, label, fut) in checks {
        let started = Instant::now();
        let result = rt.block_on(AssertUnwindSafe(fut).catch_unwind());
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(Ok(detail)) => println!("criterion {n}: PASS  {label} ({detail}; {secs:.2}s)"),
            Ok(Err(why)) => {
                failed += 1;
                println!("criterion {n}: FAIL  {label} ({why}; {secs:.2}s)");
            }
            Err(panic) => {
                failed += 1;
                let why = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                println!("criterion {n}: FAIL  {label} (panic: {why}; {secs:.2}s)");
            }
        }
    }
    rt.shutdown_timeout(Duration::from_secs(1));
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn fast_endpoint(server: &MockServer) -> EndpointConfig {
    let mut ep = EndpointConfig::new(server.base_url(), "scripted-model");
    ep.backoff_base = Duration::from_millis(1);
    ep
}

fn in_memory(t: &ScriptedTask) -> (TaskConfig, Dataset) {
    let cfg = parse_task_config(&t.yaml()).unwrap();
    let records: Vec<Record> =
        t.records_jsonl().lines().enumerate().map(|(i, l)| Record::from_json_line(l, "test", i + 1).unwrap()).collect();
    let ds = Dataset { name: t.name.clone(), subset: None, splits: BTreeMap::from([("test".to_string(), records)]) };
    (cfg, ds)
}

fn score(task: &str, acc: f64) -> TaskScore {
    TaskScore {
        task: task.into(),
        total: 100,
        answered: 100,
        correct_count: 0,
        no_valid_response: 0,
        skipped: 0,
        accuracy: Some(acc),
        accuracy_display: None,
        complete: true,
    }
}

const TASKS: [&str; 7] = ["t1", "t2", "t3", "t4", "t5", "t6", "t7"];

async fn c1_averages() -> Outcome {
    let started = Instant::now();
    let rows: [(&str, f64, [f64; 7]); 2] = [
        ("domain-tuned-7b", 69.20, [69.93, 78.21, 85.63, 65.65, 73.33, 61.33, 50.29]),
        ("general-7b", 62.69, [60.84, 66.24, 75.12, 62.38, 73.71, 52.02, 48.54]),
    ];
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    for (model, want, accs) in rows {
        let scores: Vec<TaskScore> = TASKS.iter().zip(accs).map(|(t, a)| score(t, a)).collect();
        let got = aggregate_average(&scores).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() <= 0.005, "{model}: {got} != {want}");

        // the same arithmetic through a stored run
        let run = store
            .create_run(NewRun {
                run_id: None,
                model_name: model.into(),
                endpoint_url: "http://fixture".into(),
                model_kind: ModelKind::FineTuned,
                tasks: TASKS.iter().map(|t| t.to_string()).collect(),
                k: 5,
                concurrency: 1,
            })
            .unwrap();
        store.mark_running(&run.run_id).unwrap();
        for s in &scores {
            store.set_task_score(&run.run_id, s).unwrap();
        }
        let avg = average_of(&store.get_run(&run.run_id).unwrap().task_scores);
        store.finish(&run.run_id, RunStatus::Completed, avg, None).unwrap();
        let stored = store.get_run(&run.run_id).unwrap().average.unwrap_or(f64::NAN);
        ensure!((stored - want).abs() <= 0.005, "{model}: stored average {stored} != {want}");
        ensure!(format!("{stored:.2}") == format!("{want:.2}"), "{model}: renders as {stored:.2}");
    }
    let board = store.query_leaderboard();
    let order: Vec<Option<f64>> = board.rows.iter().map(|r| r.average).collect();
    ensure!(order == vec![Some(69.20), Some(62.69)], "leaderboard order {order:?}");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok("69.20 and 62.69".into())
}

async fn scripted_run(concurrency: usize) -> Result<(TaskOutcome, usize, Duration), String> {
    let t = ScriptedTask::new("scripted", 200);
    let server = MockServer::start(MockConfig::default().with_scripts(t.scripts())).await.map_err(|e| e.to_string())?;
    let (task, ds) = in_memory(&t);
    let job = EvalJob::new("acc", fast_endpoint(&server), vec![task.clone()])
        .and_then(|j| j.with_concurrency(concurrency))
        .map_err(|e| e.to_string())?;
    let sink = MemorySink::default();
    let started = Instant::now();
    let out = Evaluator::default()
        .evaluate_task(&job, &task, &ds, &sink, &CancelFlag::new())
        .await
        .map_err(|e| e.to_string())?;
    Ok((out, server.stats().completions(), started.elapsed()))
}

async fn c2_scripted_task() -> Outcome {
    let t = ScriptedTask::new("scripted", 200);
    ensure!(t.invalid_modal() >= 20, "only {} invalid-modal questions", t.invalid_modal());
    ensure!(t.expected_no_valid() >= 10, "only {} no-valid questions", t.expected_no_valid());
    let (out, requests, elapsed) = scripted_run(8).await?;
    let s = &out.score;
    let expected = 100.0 * t.expected_correct() as f64 / t.len() as f64;
    ensure!(s.total == 200, "total {}", s.total);
    ensure!(s.accuracy == Some(expected), "accuracy {:?} != {expected}", s.accuracy);
    ensure!(s.no_valid_response == t.expected_no_valid(), "no_valid {} != {}", s.no_valid_response, t.expected_no_valid());
    ensure!(requests == s.answered + s.no_valid_response, "{requests} requests for {} + {}", s.answered, s.no_valid_response);
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("accuracy {:.2}, {requests} requests", expected))
}

fn verdict_multiset(o: &TaskOutcome) -> Vec<String> {
    let mut keys: Vec<String> = o.verdicts.iter().map(QuestionVerdict::outcome_key).collect();
    keys.sort();
    keys
}

async fn c3_concurrency() -> Outcome {
    let (a, _, _) = scripted_run(1).await?;
    let (b, _, _) = scripted_run(32).await?;
    ensure!(a.score == b.score, "scores differ: {:?} vs {:?}", a.score, b.score);
    ensure!(verdict_multiset(&a) == verdict_multiset(&b), "verdict multisets differ");
    Ok(format!("{} verdicts each", a.verdicts.len()))
}

fn mmlu_fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mmlu")
}

async fn c4_golden() -> Outcome {
    let root = mmlu_fixture();
    let catalog = TaskCatalog::load_dir(&root.join("tasks")).map_err(|e| e.to_string())?;
    let task = catalog.get("mmlu").ok_or("mmlu task missing")?;
    let ds = load_for_task(&root.join("data"), task).map_err(|e| e.to_string())?;
    let dev = ds.split("dev").map_err(|e| e.to_string())?;
    let test = &ds.split("test").map_err(|e| e.to_string())?[0];
    let sel = FirstN.select(dev, test, &task.fewshot).map_err(|e| e.to_string())?;
    let picked: Vec<&str> = sel.records(dev).iter().map(|r| r.id.as_str()).collect();
    let want: Vec<&str> = dev
        .iter()
        .filter(|r| r.get("subject").and_then(|v| v.as_str()) == test.get("subject").and_then(|v| v.as_str()))
        .take(5)
        .map(|r| r.id.as_str())
        .collect();
    ensure!(picked == want && picked.len() == 5, "few-shot picked {picked:?}, expected {want:?}");
    let inst = build_prompt_instance(task, test, &sel.records(dev)).map_err(|e| e.to_string())?;
    let golden = std::fs::read_to_string(root.join("golden_prompt.txt")).map_err(|e| e.to_string())?;
    ensure!(inst.prompt_text == golden, "prompt differs from golden file");
    ensure!(inst.prompt_text.ends_with("Answer:"), "prompt does not end with Answer:");
    Ok(format!("{} bytes, shots {}", golden.len(), picked.join(",")))
}

/// Straight transcription of the selection loop with the extra stop when a
/// sweep selects nothing.
fn naive_selection(mut topics: Vec<(i64, Vec<RawRecord>)>, set_size: usize) -> Selection {
    topics.sort_by_key(|(t, _)| *t);
    let clean = |r: &RawRecord| !r.text.contains(&"_".repeat(10)) && r.text.chars().all(|c| (c as u32) <= 127);
    let mut selected = Vec::new();
    while selected.len() < set_size {
        let before = selected.len();
        for (topic, records) in topics.iter_mut() {
            while !records.is_empty() {
                let r = records.remove(0);
                if clean(&r) {
                    selected.push((*topic, r.id));
                    break;
                }
            }
            if selected.len() == set_size {
                break;
            }
        }
        if selected.len() == before {
            break;
        }
    }
    let remaining = topics.iter().map(|(t, r)| (*t, r.len())).collect();
    (selected, remaining)
}

fn random_topics(seed: u64) -> Vec<(i64, Vec<RawRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut budget = rng.random_range(0..=1000usize);
    let mut ids: Vec<i64> = (-1..50).collect();
    let mut next = 0;
    (0..rng.random_range(1..=25))
        .map(|_| {
            let topic = ids.remove(rng.random_range(0..ids.len()));
            let n = rng.random_range(0..=budget.min(150));
            budget -= n;
            let records = (0..n)
                .map(|_| {
                    next += 1;
                    let text = match rng.random_range(0..8) {
                        0 => format!("blank {} here", "_".repeat(rng.random_range(10..30))),
                        1 => "r\u{e9}sum\u{e9}".to_string(),
                        2 => format!("nine {}", "_".repeat(9)),
                        _ => format!("record {next}"),
                    };
                    RawRecord::new(format!("id{next}"), text)
                })
                .collect();
            (topic, records)
        })
        .collect()
}

async fn c5_curation() -> Outcome {
    let started = Instant::now();
    let to_map = |v: &[(i64, Vec<RawRecord>)]| -> TopicMap {
        v.iter().flat_map(|(t, rs)| rs.iter().cloned().map(move |r| (*t, r))).collect()
    };
    let mut compared = 0;
    for seed in 0..50 {
        let input = random_topics(1000 + seed);
        let total: usize = input.iter().map(|(_, r)| r.len()).sum();
        ensure!(total <= 1000, "seed {seed}: {total} records");
        for set_size in [1, 10, 250, 10_000] {
            let cfg = CurationConfig { set_size, ..CurationConfig::default() };
            let got: Vec<(i64, String)> = select_records(to_map(&input), &cfg).into_iter().map(|(t, r)| (t, r.id)).collect();
            let (want, remaining) = naive_selection(input.clone(), set_size);
            ensure!(got == want, "seed {seed} set_size {set_size}: selection differs from oracle");
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for (t, _) in &got {
                *counts.entry(*t).or_default() += 1;
            }
            let live: Vec<usize> =
                remaining.iter().filter(|(_, left)| *left > 0).map(|(t, _)| counts.get(t).copied().unwrap_or(0)).collect();
            if let (Some(lo), Some(hi)) = (live.iter().min(), live.iter().max()) {
                ensure!(hi - lo <= 1, "seed {seed} set_size {set_size}: counts {live:?}");
            }
            compared += 1;
        }
    }
    let full: TopicMap =
        (0..13i64).flat_map(|t| (0..900).map(move |i| (t - 1, RawRecord::new(format!("{t}-{i}"), "clean text")))).collect();
    let report = curation_report(&select_records(full, &CurationConfig::default()));
    let table = report.to_table(&BTreeMap::new());
    let last = table.lines().last().unwrap_or_default();
    ensure!(report.total == 10_000, "full supply selected {}", report.total);
    ensure!(last.starts_with("Total") && last.ends_with("10,000"), "total row `{last}`");
    ensure!(table.lines().next().unwrap_or_default().starts_with("Topic"), "header row");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{compared} comparisons, Total 10,000"))
}

async fn c6_cleaning() -> Outcome {
    let cfg = CurationConfig::default();
    let mut runner = TestRunner::new(PropConfig { cases: 512, failure_persistence: None, ..PropConfig::default() });
    let underscore = ("[ -~]{0,30}", 10usize..60, "[ -~]{0,30}");
    runner
        .run(&underscore, |(a, n, b)| {
            let text = format!("{a}{}{b}", "_".repeat(n));
            prop_assert!(!text_is_clean(&text, &cfg));
            Ok(())
        })
        .map_err(|e| format!("underscore run accepted: {e}"))?;
    let non_ascii = ("[ -~]{0,30}", any::<char>().prop_filter("non-ascii", |c| !c.is_ascii()), "[ -~]{0,30}");
    runner
        .run(&non_ascii, |(a, c, b)| {
            let text = format!("{a}{c}{b}");
            prop_assert!(!text_is_clean(&text, &cfg));
            Ok(())
        })
        .map_err(|e| format!("non-ascii accepted: {e}"))?;
    let short_runs = proptest::collection::vec(("[ -^`-~]{0,12}", 0usize..=9), 0..10);
    runner
        .run(&short_runs, |parts| {
            let text: String = parts.iter().map(|(s, n)| format!("{s}{}", "_".repeat(*n))).collect::<Vec<_>>().join("|");
            prop_assert!(text_is_clean(&text, &cfg));
            prop_assert!(is_clean(&RawRecord::new("x", text), &cfg));
            Ok(())
        })
        .map_err(|e| format!("clean text rejected: {e}"))?;
    ensure!(text_is_clean(&"_".repeat(9), &cfg), "nine underscores rejected");
    ensure!(!text_is_clean(&"_".repeat(10), &cfg), "ten underscores accepted");
    Ok("3 properties x 512 cases".into())
}

fn qagen_ctx(gen: &MockServer, judge: &MockServer) -> GenContext {
    GenContext {
        client: InferenceClient::new(),
        generator: fast_endpoint(gen),
        judge: fast_endpoint(judge),
        judge_prompt: PromptSet::builtin().judge().to_string(),
        threshold: 8,
        max_attempts: 10,
    }
}

fn user_turn(body: &Value) -> String {
    body["messages"][1]["content"].as_str().unwrap_or_default().to_string()
}

async fn c7_qagen() -> Outcome {
    let started = Instant::now();
    let text: String = (0..80).map(|i| format!("paragraph {i} on sustainment and logistics. ")).collect();
    let docs = vec![("manual".to_string(), text)];
    let cfg = QagenConfig { chunk_chars: 500, concurrency: 4, seed: 3, ..QagenConfig::default() };
    let registry = CategoryRegistry::from_prompts(&PromptSet::builtin());
    let llm: Vec<String> = LLM_CATEGORIES.iter().map(|s| s.to_string()).collect();
    let cats = registry.select(&llm).map_err(|e| e.to_string())?;
    let pair = "((Q)): What is discussed?\n((A)): Sustainment.";

    // rejecting judge
    let gen = MockServer::start(MockConfig::fixed_reply(pair)).await.map_err(|e| e.to_string())?;
    let judge = MockServer::start(MockConfig::fixed_reply("Score: 4")).await.map_err(|e| e.to_string())?;
    let out = run_pipeline(&docs, &cats, &qagen_ctx(&gen, &judge), &cfg).await.map_err(|e| e.to_string())?;
    let items = out.manifest.chunks * cats.len();
    ensure!(out.manifest.chunks >= 2, "only {} chunks", out.manifest.chunks);
    ensure!(out.pairs.is_empty(), "{} pairs accepted", out.pairs.len());
    ensure!(out.manifest.unsuitable.len() == items, "{} of {items} marked", out.manifest.unsuitable.len());
    ensure!(
        out.manifest.unsuitable.iter().all(|m| m.label == UNSUITABLE_LABEL && m.attempts == 10),
        "unsuitable marks carry wrong label or attempt count"
    );
    let mut per_item: BTreeMap<String, usize> = BTreeMap::new();
    for r in gen.stats().requests() {
        *per_item.entry(user_turn(&r.body)).or_default() += 1;
    }
    ensure!(per_item.len() == items && per_item.values().all(|&n| n == 10), "generator calls per item {:?}", per_item.values());
    let mut per_chunk: BTreeMap<String, usize> = BTreeMap::new();
    for r in judge.stats().requests() {
        *per_chunk.entry(user_turn(&r.body).split("### QUESTION").next().unwrap_or_default().to_string()).or_default() += 1;
    }
    ensure!(
        per_chunk.len() == out.manifest.chunks && per_chunk.values().all(|&n| n == 10 * cats.len()),
        "judge calls per chunk {:?}",
        per_chunk.values()
    );

    // accepting judge
    let gen = MockServer::start(MockConfig::fixed_reply(pair)).await.map_err(|e| e.to_string())?;
    let judge = MockServer::start(MockConfig::fixed_reply("9")).await.map_err(|e| e.to_string())?;
    let out = run_pipeline(&docs, &cats, &qagen_ctx(&gen, &judge), &cfg).await.map_err(|e| e.to_string())?;
    ensure!(out.pairs.len() == items, "{} of {items} accepted", out.pairs.len());
    ensure!(gen.stats().chat() == items && judge.stats().chat() == items, "{} gen / {} judge calls", gen.stats().chat(), judge.stats().chat());

    // completion: no requests, exact reconstruction at every fraction
    let gen = MockServer::start(MockConfig::fixed_reply(pair)).await.map_err(|e| e.to_string())?;
    let judge = MockServer::start(MockConfig::fixed_reply("9")).await.map_err(|e| e.to_string())?;
    let completion = registry.select(&[COMPLETION.to_string()]).map_err(|e| e.to_string())?;
    let out = run_pipeline(&docs, &completion, &qagen_ctx(&gen, &judge), &cfg).await.map_err(|e| e.to_string())?;
    ensure!(gen.stats().total() + judge.stats().total() == 0, "completion issued requests");
    let chunks = chunk_corpus("manual", &docs[0].1, cfg.chunk_chars).map_err(|e| e.to_string())?;
    ensure!(out.pairs.len() == chunks.len(), "{} completion pairs for {} chunks", out.pairs.len(), chunks.len());
    let pool = PromptSet::builtin().completion_pool();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for chunk in &chunks {
        for f in COMPLETION_FRACTIONS {
            let p = make_completion_example(chunk, f, &pool, &mut rng).map_err(|e| e.to_string())?;
            let prefix = completion_prefix(&p.question).ok_or("question lacks the input marker")?;
            ensure!(format!("{prefix}{}", p.answer) == chunk.text, "chunk {} fraction {f} does not reconstruct", chunk.id);
            let want_len = (chunk.text.chars().count() as f64 * f).floor() as usize;
            ensure!(prefix.chars().count() == want_len, "chunk {} fraction {f}: prefix length", chunk.id);
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(20), "took {elapsed:?}");
    Ok(format!("{items} items: 10+10 rejected, 1+1 accepted; completion 0 requests"))
}

/// Appends like the store sink, then acknowledges each verdict on stdout.
struct AckSink<'a> {
    store: &'a RunStore,
    run_id: String,
}

impl VerdictSink for AckSink<'_> {
    fn task_started(&self, task: &str, total: usize) -> Result<(), StoreError> {
        self.store.task_started(&self.run_id, task, total)
    }

    fn record(&self, task: &str, v: &QuestionVerdict) -> Result<(), StoreError> {
        self.store.append_verdict(&self.run_id, task, v)?;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "ack {}", v.record_id);
        let _ = out.flush();
        Ok(())
    }
}

/// Child side of the restart check: evaluates until killed.
fn restart_child(params: &str) {
    let spec: Value = serde_json::from_str(params).expect("child params");
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let store = RunStore::open(spec["store"].as_str().unwrap()).unwrap();
        let run_id = spec["run_id"].as_str().unwrap().to_string();
        let t = ScriptedTask::new("crash", 200);
        let (task, ds) = in_memory(&t);
        store
            .create_run(NewRun {
                run_id: Some(run_id.clone()),
                model_name: "crash-model".into(),
                endpoint_url: spec["base_url"].as_str().unwrap().into(),
                model_kind: ModelKind::Base,
                tasks: vec!["crash".into()],
                k: 5,
                concurrency: 4,
            })
            .unwrap();
        store.mark_running(&run_id).unwrap();
        let mut ep = EndpointConfig::new(spec["base_url"].as_str().unwrap(), "crash-model");
        ep.backoff_base = Duration::from_millis(1);
        let job = EvalJob::new(&run_id, ep, vec![task.clone()]).unwrap().with_concurrency(4).unwrap();
        let sink = AckSink { store: &store, run_id: run_id.clone() };
        let _ = Evaluator::default().evaluate_task(&job, &task, &ds, &sink, &CancelFlag::new()).await;
        println!("finished");
    });
}

async fn c8_store() -> Outcome {
    // end-to-end run, then recompute from the log
    let t = ScriptedTask::new("stored", 100);
    let dir = tempfile::tempdir().unwrap();
    let (tasks_dir, data_dir) = write_fixture(dir.path(), &[&t]);
    let server = MockServer::start(MockConfig::default().with_scripts(t.scripts())).await.map_err(|e| e.to_string())?;
    let store = RunStore::open(dir.path().join("store")).map_err(|e| e.to_string())?;
    let catalog = TaskCatalog::load_dir(&tasks_dir).map_err(|e| e.to_string())?;
    let run = store
        .create_run(NewRun {
            run_id: None,
            model_name: "m".into(),
            endpoint_url: server.base_url(),
            model_kind: ModelKind::FineTuned,
            tasks: vec!["stored".into()],
            k: 5,
            concurrency: 8,
        })
        .map_err(|e| e.to_string())?;
    let job = EvalJob::new(&run.run_id, fast_endpoint(&server), vec![catalog.get("stored").unwrap().clone()])
        .map_err(|e| e.to_string())?;
    let done = Evaluator::default()
        .evaluate_run(&job, &store, &DataRoot(data_dir), &CancelFlag::new())
        .await
        .map_err(|e| e.to_string())?;
    ensure!(done.status == RunStatus::Completed, "run ended {:?}", done.status);
    let recomputed = store.recompute_scores(&run.run_id).map_err(|e| e.to_string())?;
    ensure!(recomputed == done.task_scores, "recomputed scores differ from stored");
    let failed = store.query_audit(&run.run_id, None, AuditFilter::Failed, 0, 1000).map_err(|e| e.to_string())?;
    let ids: Vec<String> = failed.items.iter().map(|e| e.verdict.record_id.clone()).collect();
    ensure!(ids == t.expected_failures(), "failed filter returned {} ids, expected {}", ids.len(), t.expected_failures().len());

    // forced restart mid-run
    let crash = ScriptedTask::new("crash", 200);
    let slow = MockConfig { latency: Duration::from_millis(15), ..MockConfig::default() }.with_scripts(crash.scripts());
    let server = MockServer::start(slow).await.map_err(|e| e.to_string())?;
    let crash_store = dir.path().join("crash-store");
    let spec = json!({ "store": crash_store, "base_url": server.base_url(), "run_id": "crash-run" }).to_string();
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let acked = tokio::task::spawn_blocking(move || -> Result<Vec<String>, String> {
        let mut child = Command::new(exe)
            .env(CHILD_ENV, spec)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let mut acked = Vec::new();
        while acked.len() < 40 {
            match lines.next() {
                Some(Ok(l)) if l.starts_with("ack ") => acked.push(l[4..].to_string()),
                Some(Ok(l)) => return Err(format!("child finished early: {l}")),
                _ => return Err("child exited before 40 acks".into()),
            }
        }
        child.kill().map_err(|e| e.to_string())?;
        // acks already in the pipe were acknowledged before the kill
        for l in lines.map_while(Result::ok) {
            if let Some(id) = l.strip_prefix("ack ") {
                acked.push(id.to_string());
            }
        }
        let _ = child.wait();
        Ok(acked)
    })
    .await
    .map_err(|e| e.to_string())??;
    ensure!(acked.len() < 200, "child completed before the kill");

    let reopened = RunStore::open(&crash_store).map_err(|e| e.to_string())?;
    let after = reopened.get_run("crash-run").map_err(|e| e.to_string())?;
    ensure!(after.status == RunStatus::Failed, "interrupted run is {:?}", after.status);
    let persisted: std::collections::HashSet<String> =
        reopened.verdicts("crash-run").map_err(|e| e.to_string())?.into_iter().map(|e| e.verdict.record_id).collect();
    let lost: Vec<&String> = acked.iter().filter(|id| !persisted.contains(*id)).collect();
    ensure!(lost.is_empty(), "{} acknowledged verdicts lost: {lost:?}", lost.len());
    Ok(format!("recompute equal, {} failures, {} acks survived kill", ids.len(), acked.len()))
}

fn row_of(cli_stdout: &str, task: &str) -> Vec<String> {
    cli_stdout
        .lines()
        .find(|l| l.split_whitespace().next() == Some(task))
        .map(|l| l.split_whitespace().map(String::from).collect())
        .unwrap_or_default()
}

async fn c9_api() -> Outcome {
    let a = ScriptedTask::new("alpha", 80);
    let b = ScriptedTask::new("beta", 30);
    let dir = tempfile::tempdir().unwrap();
    let (tasks_dir, data_dir) = write_fixture(dir.path(), &[&a, &b]);
    let mock = MockServer::start(MockConfig::default().with_scripts(proctor_mock::fixture::merged_scripts([&a, &b])))
        .await
        .map_err(|e| e.to_string())?;
    let gw = Gateway::start(&dir.path().join("api"), &tasks_dir, &data_dir).await;
    let http = reqwest::Client::new();

    let (status, run) = submit(
        &http,
        &gw,
        json!({"model_name": "m", "endpoint": endpoint_json(&mock.base_url(), "m"), "tasks": ["alpha", "beta"], "concurrency": 8}),
    )
    .await;
    ensure!(status == 202, "submit returned {status}: {run}");
    let done = wait_terminal(&http, &gw, run["run_id"].as_str().unwrap_or_default()).await;
    ensure!(done["status"] == "completed", "run ended {}", done["status"]);

    let out = proctor(
        vec![
            s("evaluate"),
            s("--endpoint"),
            mock.base_url(),
            s("--model"),
            s("m"),
            s("--tasks"),
            s("alpha,beta"),
            s("--out"),
            path_str(&dir.path().join("cli")),
            s("--tasks-dir"),
            path_str(&tasks_dir),
            s("--data"),
            path_str(&data_dir),
        ],
        vec![],
    )
    .await;
    ensure!(out.status.success(), "cli exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for task in ["alpha", "beta"] {
        let sc = &done["task_scores"][task];
        let api_row = vec![
            task.to_string(),
            sc["total"].to_string(),
            sc["correct_count"].to_string(),
            sc["no_valid_response"].to_string(),
            sc["skipped"].to_string(),
            sc["accuracy_display"].as_str().unwrap_or_default().to_string(),
        ];
        let cli_row = row_of(&text, task);
        ensure!(api_row == cli_row, "{task}: api {api_row:?} vs cli {cli_row:?}");
    }
    let avg_line = format!("average: {:.2}", done["average"].as_f64().unwrap_or(f64::NAN));
    ensure!(text.contains(&avg_line), "cli output lacks `{avg_line}`");

    let mut mocks = Vec::new();
    for i in 0..11 {
        mocks.push(MockServer::start(MockConfig::fixed_reply(format!("pane {i}"))).await.map_err(|e| e.to_string())?);
    }
    let participants: Vec<Value> = mocks.iter().map(|m| endpoint_json(&m.base_url(), "m")).collect();
    let resp = http.post(gw.api("/chat/sessions")).json(&json!({ "participants": participants })).send().await.unwrap();
    let status = resp.status().as_u16();
    let body: Value = resp.json().await.unwrap_or(Value::Null);
    ensure!(status == 400 && body["code"] == "too_many_participants", "11 participants: {status} {body}");
    ensure!(mocks.iter().all(|m| m.stats().total() == 0), "rejected session reached a mock");

    let ten = &participants[..10];
    let resp = http.post(gw.api("/chat/sessions")).json(&json!({ "participants": ten })).send().await.unwrap();
    ensure!(resp.status().as_u16() == 201, "10 participants: {}", resp.status());
    let session: Value = resp.json().await.unwrap();
    let (status, events, _) = chat_turn(&http, &gw, session["session_id"].as_str().unwrap_or_default(), "status report").await;
    ensure!(status == 200, "chat turn returned {status}");
    let done_panes = events.iter().filter(|e| e.event == "done").count();
    ensure!(done_panes == 10, "{done_panes} panes finished");
    let observed = mocks[..10].iter().filter(|m| m.stats().chat() == 1).count();
    ensure!(observed == 10, "{observed} of 10 mocks saw the turn");
    ensure!(mocks[10].stats().total() == 0, "unused mock was contacted");
    Ok("REST == CLI on 2 tasks, 11 -> 400, 10/10 mocks observed".to_string())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}
