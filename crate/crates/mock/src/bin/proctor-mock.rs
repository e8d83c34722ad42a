//! Runs the deterministic mock inference server.
//!
//! `--fixture DIR` also writes a scripted task (tasks/ and data/ under DIR)
//! and serves its scripts, so `proctor evaluate` has something to score.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use proctor_mock::fixture::ScriptedTask;
use proctor_mock::{ChatMode, LogprobMode, MockConfig, MockServer};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Logprobs {
    Full,
    Missing,
    ChatOnly,
}

#[derive(Debug, Parser)]
#[command(name = "proctor-mock", about = "Deterministic OpenAI-compatible mock server")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8001")]
    addr: SocketAddr,
    /// Write a scripted task fixture under this directory and serve its scripts.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, default_value = "scripted_mc")]
    task_name: String,
    #[arg(long, default_value_t = 200)]
    questions: usize,
    #[arg(long, value_enum, default_value = "full")]
    logprobs: Logprobs,
    /// Fixed chat reply; chat echoes the last user turn when absent.
    #[arg(long)]
    reply: Option<String>,
    /// Milliseconds between streamed fragments.
    #[arg(long, default_value_t = 0)]
    stream_delay_ms: u64,
    /// Answer every request with this HTTP status.
    #[arg(long)]
    fail_status: Option<u16>,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    let mut cfg = MockConfig {
        logprobs: match args.logprobs {
            Logprobs::Full => LogprobMode::Full,
            Logprobs::Missing => LogprobMode::Missing,
            Logprobs::ChatOnly => LogprobMode::ChatOnly,
        },
        stream_delay: Duration::from_millis(args.stream_delay_ms),
        always_status: args.fail_status,
        ..MockConfig::default()
    };
    if let Some(reply) = args.reply {
        cfg.chat = ChatMode::Fixed(reply);
    }
    if let Some(dir) = &args.fixture {
        let task = ScriptedTask::new(&args.task_name, args.questions);
        if let Err(e) = task.write_to(&dir.join("tasks"), &dir.join("data")) {
            eprintln!("{}", serde_json::json!({"error": "fixture_write_failed", "message": e.to_string()}));
            std::process::exit(1);
        }
        cfg.scripts = task.scripts();
        eprintln!(
            "fixture: task {} with {} questions, expected accuracy {:.2}",
            task.name,
            task.len(),
            task.expected_accuracy()
        );
    }
    let server = match MockServer::bind(args.addr, cfg).await {
        Ok(s) => s,
        Err(e) => {
            let code = if e.kind() == std::io::ErrorKind::AddrInUse { "addr_in_use" } else { "bind_failed" };
            eprintln!("{}", serde_json::json!({"error": code, "message": e.to_string()}));
            std::process::exit(1);
        }
    };
    eprintln!("mock listening on {}", server.base_url());
    server.run_until_ctrl_c().await;
}
