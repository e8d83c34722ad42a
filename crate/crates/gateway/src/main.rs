use clap::Parser;
use proctor_gateway::cli::{self, Cli};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("PROCTOR_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let code = match cli::run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            1
        }
    };
    std::process::exit(code);
}
