use clap::Parser as _;
use icu_cli::{execute, Cli};
use tracing_subscriber::EnvFilter;

fn main() {
    let cli = Cli::parse();
    let filter = cli
        .log
        .as_deref()
        .map(EnvFilter::new)
        .unwrap_or_else(|| EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")));
    tracing_subscriber::fmt().json().with_env_filter(filter).with_writer(std::io::stderr).init();
    if let Err(e) = execute(cli) {
        tracing::error!(error = %e, exit_code = e.exit_code(), "command failed");
        eprintln!("icu: {e}");
        std::process::exit(e.exit_code());
    }
}
