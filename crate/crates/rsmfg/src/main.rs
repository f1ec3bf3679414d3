use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rsmfg::{execute, Mode, THREADS_ENV};

/// Risk-sensitive LQG and major-minor mean-field game solver.
#[derive(Parser)]
#[command(name = "rsmfg", version)]
struct Cli {
    #[arg(value_enum)]
    mode: Mode,
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's output.directory, else rsmfg-out/<mode>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not configure {n} threads: {e}");
        }
    }
    match execute(cli.mode, &cli.config, cli.out.as_deref()) {
        Ok(bundle) => {
            for (k, v) in &bundle.summary {
                println!("{k}: {v}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.error.exit_code() as u8)
        }
    }
}
