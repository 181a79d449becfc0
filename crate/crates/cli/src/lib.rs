//! Command implementations behind the `sdfdro` binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
//! 3 empty extraction.

pub mod commands;
pub mod config;

pub use commands::{
    eval, extract, extract_mesh, fit, load_ground_truth, pipeline, synth, synthesize, FitResult, PipelineRow,
    Status,
};
pub use config::{RunConfig, Snapshot, CONFIG_KEYS};

use std::fmt;
use std::path::PathBuf;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_EMPTY: i32 = 3;

/// Bad arguments or configuration, detected before any work starts.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Marching cubes found no surface.
#[derive(Debug, Clone, PartialEq)]
pub struct EmptyExtraction(pub PathBuf);

impl fmt::Display for EmptyExtraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "extraction produced an empty mesh: {}", self.0.display())
    }
}

impl std::error::Error for EmptyExtraction {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        EXIT_USAGE
    } else if err.chain().any(|e| e.is::<EmptyExtraction>()) {
        EXIT_EMPTY
    } else {
        EXIT_RUNTIME
    }
}

/// Sizes the global rayon pool from `--threads` or `SDFDRO_THREADS`.
/// Results do not depend on the thread count.
pub fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("SDFDRO_THREADS") {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| UsageError(format!("SDFDRO_THREADS must be a positive integer, got {v:?}")))?,
            ),
            _ => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(UsageError("thread count must be >= 1".into()).into());
        }
        // a pool may already exist when called twice in one process
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
    Ok(())
}
