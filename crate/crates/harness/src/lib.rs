//! Experiment harness for `fedvar`: configuration, panel ingestion,
//! simulation and forecasting runs, and result files.

pub mod config;
pub mod empirical;
pub mod ingest;
pub mod output;
pub mod run;
pub mod simulate;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    Model(#[from] fedvar::Error),
    #[error("{failed} of {total} replications failed (more than 1%)")]
    TooManyFailures { failed: usize, total: usize },
}
