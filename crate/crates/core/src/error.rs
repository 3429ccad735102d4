use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index out of range: {0}")]
    Range(String),
    #[error("sequence of {len} tokens exceeds the {max}-token context")]
    ContextLength { len: usize, max: usize },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invalid hook point: {0}")]
    Hook(String),
    #[error("override error: {0}")]
    Override(String),
    #[error("degenerate baseline: clean and corrupted logit differences are {clean} and {corrupted}")]
    Baseline { clean: f32, corrupted: f32 },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("path patching error: {0}")]
    Path(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("requested {requested} distinct prompts but the template only has {available}")]
    Capacity { requested: usize, available: u128 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
