use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label value {value} is outside [0, {num_classes}) and is not the ignore index")]
    LabelOutOfRange { value: u8, num_classes: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("missing prerequisite: {}", .0.display())]
    MissingPrerequisite(PathBuf),

    #[error("phase `{phase}` has not been run yet (no {}); run it first", path.display())]
    PhaseNotRun { phase: String, path: PathBuf },

    #[error("phase `{phase}` is already complete ({}); pass --force to redo it", path.display())]
    AlreadyComplete { phase: String, path: PathBuf },

    #[error("{} was produced by a different configuration; redo phase `{phase}` with --force", path.display())]
    StalePrerequisite { phase: String, path: PathBuf },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged in {phase} at iteration {iteration}: non-finite loss")]
    Diverged { phase: String, iteration: usize },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
