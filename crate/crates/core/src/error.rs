use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("depth window is empty: L = {depth}, R_depth = {r_depth}")]
    EmptyWindow { depth: usize, r_depth: f64 },
    #[error("unknown segment {0}")]
    UnknownSegment(usize),
    #[error("global version {requested} evicted (oldest retained is {oldest})")]
    VersionEvicted { requested: usize, oldest: usize },
    #[error("empty dataset: {0}")]
    EmptyData(&'static str),
    #[error("simulation deadlock: {0}")]
    Deadlock(String),
    #[error("activation cache does not match the parameters or gradients given")]
    StaleCache,
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
