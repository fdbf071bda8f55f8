use thiserror::Error;

use hvae_core::alloc::AllocError;
use hvae_core::datasets::DataError;
use hvae_core::hvae::HvaeError;
use hvae_core::metrics::MetricsError;
use hvae_core::scoring::ScoreError;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] HvaeError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{failed} of {total} sweep cells failed")]
    SweepFailures { failed: usize, total: usize },
}

impl CliError {
    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}
