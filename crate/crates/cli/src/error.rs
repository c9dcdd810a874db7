use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing artifact {}: run `qv2x {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("artifact {} does not match this run: {detail}", path.display())]
    Mismatch { path: PathBuf, detail: String },

    #[error("malformed artifact {}: {detail}", path.display())]
    Malformed { path: PathBuf, detail: String },

    #[error(transparent)]
    Core(#[from] qv2x_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit code; each error class gets its own.
    pub fn exit_code(&self) -> i32 {
        use qv2x_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Mismatch { .. } => 4,
            CliError::Malformed { .. } | CliError::Csv(_) => 5,
            CliError::Io(_) => 1,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::Empty(_) => 2,
                E::VersionMismatch { .. } => 4,
                E::Format(_) | E::Json(_) | E::Wire(_) => 5,
                E::Diverged { .. } | E::NonFiniteObjective { .. } | E::Shape(_) | E::Uncalibrated(_) => 6,
                E::Io(_) => 1,
            },
        }
    }
}
