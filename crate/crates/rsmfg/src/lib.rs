//! Command-line front end: JSON configs in, long-format CSV tables and a
//! manifest out.

pub mod config;
pub mod error;
pub mod modes;
pub mod output;

use std::path::Path;

pub use config::{load_config, parse_config, ExperimentConfig, Mode, Model};
pub use error::{CliError, Result};
pub use modes::{run, Failure};
pub use output::{Bundle, Table};

pub const THREADS_ENV: &str = "RSMFG_THREADS";

/// Loads `config`, runs `mode` and writes the bundle (or the partial bundle of
/// a failed run) to `out`, falling back to the configured directory.
pub fn execute(mode: Mode, config: &Path, out: Option<&Path>) -> std::result::Result<Bundle, Failure> {
    let cfg = load_config(config)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("rsmfg-out").join(mode.name()));
    match run(mode, &cfg) {
        Ok(b) => {
            b.write(&dir, mode, &cfg, "ok")?;
            Ok(b)
        }
        Err(f) => {
            if let Some(b) = &f.partial {
                b.write(&dir, mode, &cfg, "failed")?;
            }
            Err(f)
        }
    }
}
