use std::path::PathBuf;

/// Failures surfaced by the command-line tool.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] cos2p_core::Error),
    #[error("replay found {} difference(s)", .0.len())]
    Mismatch(Vec<String>),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// `1` for rejected input, `2` for failures while running.
    pub fn exit_code(&self) -> i32 {
        use cos2p_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Format { .. } | CliError::Mismatch(_) => 1,
            CliError::Core(E::Invalid { .. } | E::EmptyWindow { .. } | E::LabelOutOfRange { .. }) => 1,
            CliError::Io { .. } | CliError::Core(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
