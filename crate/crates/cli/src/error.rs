use std::path::PathBuf;

use iamnn_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 2 for bad input (configuration, missing data, incompatible or
    /// damaged checkpoints), 1 for failures during a run.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::UnknownKey { .. }
                | Error::Format { .. }
                | Error::BadMagic(_)
                | Error::UnsupportedVersion(_)
                | Error::CheckpointShape { .. }
                | Error::Checkpoint(_) => 2,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            },
        }
    }
}
