//! Config-driven experiment runner for the `rwre-lab` binary.
//!
//! A run reads one TOML config, executes the experiment named by the
//! subcommand and writes a JSON report plus CSV tables and plot data into
//! the output directory. Every file carries the SHA-256 of the config text
//! and the seed.

use std::path::PathBuf;

pub mod config;
pub mod report;
pub mod runner;
pub mod summary;

pub use config::{ExperimentConfig, ExperimentKind};
pub use report::{ReportFile, Status, SummaryRow};
pub use runner::{execute, run, Outcome, RunOutput};
pub use summary::emit_summary;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Model(#[from] rwre_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: corrupt report: {msg}")]
    CorruptReport { path: PathBuf, msg: String },
}

impl CliError {
    /// 2 for problems with the invocation or config, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Validation(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the current
/// pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

/// Compact rendering for console rows: three significant digits, no
/// trailing zeros, scientific outside [1e-3, 1e5).
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let a = x.abs();
    if (1e-3..1e5).contains(&a) {
        let decimals = (2 - a.log10().floor() as i32).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.2e}");
        let (m, e) = s.split_once('e').unwrap();
        let m = if m.contains('.') {
            m.trim_end_matches('0').trim_end_matches('.')
        } else {
            m
        };
        format!("{m}e{e}")
    }
}
