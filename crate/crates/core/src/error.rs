use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward: {0}")]
    Backward(&'static str),

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("build error: rule `{rule}` violated: {detail}")]
    Build { rule: &'static str, detail: String },

    #[error("alignment error: audio length {audio} vs visual length {visual}")]
    Alignment { audio: usize, visual: usize },

    #[error("empty input after trimming")]
    EmptyInput,

    #[error("invalid token index {index} (vocabulary {vocab})")]
    InvalidToken { index: usize, vocab: usize },

    #[error("undefined rate: {0}")]
    UndefinedRate(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config digest mismatch: checkpoint {found:016x}, model {expected:016x}")]
    DigestMismatch { expected: u64, found: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("{}: {source}", path.display())]
    File { path: std::path::PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Ties a bare I/O error to the file it concerns.
    pub fn at(self, path: &std::path::Path) -> Self {
        match self {
            Error::Io(source) => Error::File {
                path: path.to_path_buf(),
                source,
            },
            e => e,
        }
    }
}
