use thiserror::Error;

#[derive(Debug, Error)]
pub enum LdError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {shape:?} ({msg})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: u32, vocab: u32 },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("index is sealed and cannot be modified")]
    IndexSealed,
    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: String,
        stored: u32,
        computed: u32,
    },
    #[error("config mismatch: expected hash {expected:#010x}, found {found:#010x}")]
    ConfigMismatch { expected: u32, found: u32 },
    #[error("scorer failed on candidate {candidate}: {msg}")]
    ScorerFailure { candidate: u64, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(String),
}

pub type Result<T> = std::result::Result<T, LdError>;

pub(crate) fn io_err(path: impl AsRef<std::path::Path>, source: std::io::Error) -> LdError {
    LdError::Io {
        path: path.as_ref().display().to_string(),
        source,
    }
}
