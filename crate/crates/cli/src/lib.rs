//! Batch front end for deep feature factorization: configuration, the
//! pipeline stages with their on-disk artifacts, evaluation tables and
//! layer/rank sweeps. The `dff` binary is a thin clap layer over this.

pub mod config;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod sweep;

pub use config::PipelineConfig;
pub use error::{CliError, ErrorKind, Stage};
pub use eval::{average_best_iou, EvalError};
pub use pipeline::{run_pipeline, RunSummary};
pub use sweep::run_sweep;

/// Sizes the global rayon pool from `DFF_THREADS` if it is set.
pub fn init_threads_from_env() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("DFF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::config(Stage::Config, format!("DFF_THREADS={raw:?} is not a positive integer")))?;
    // A pool that is already initialized keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
