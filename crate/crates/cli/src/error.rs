use std::path::PathBuf;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ALIGNMENT: i32 = 3;
pub const EXIT_COMPUTE: i32 = 4;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] circuitscope::Error),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for bad input or configuration, 3 for unaligned prompt pairs, 4 for
    /// failures while computing or writing results.
    pub fn exit_code(&self) -> i32 {
        use circuitscope::Error as E;
        match self {
            CliError::Usage(_) => EXIT_CONFIG,
            CliError::Write { .. } => EXIT_COMPUTE,
            CliError::Core(e) => match e {
                E::Alignment(_) => EXIT_ALIGNMENT,
                E::Config(_)
                | E::Template(_)
                | E::Vocab(_)
                | E::Capacity { .. }
                | E::Load { .. }
                | E::MissingTensor(_)
                | E::Format(_)
                | E::Hook(_)
                | E::ContextLength { .. }
                | E::Io(_) => EXIT_CONFIG,
                _ => EXIT_COMPUTE,
            },
        }
    }
}
