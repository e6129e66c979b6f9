use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("invalid argument for {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("target row {row} is not a distribution (sum {sum})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(alloc::vec::Vec<usize>),
    #[error("record {node} references input {input} that was not created before it")]
    Cycle { node: usize, input: usize },
    #[error("duplicate prediction update for sample {sample_id} in epoch {epoch}")]
    DuplicateUpdate { epoch: u32, sample_id: u32 },
    #[error("stripped network has no auxiliary heads")]
    Stripped,
    #[error("empty {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { op, detail: detail.into() }
    }

    /// True for the numeric failure class (NaN/Inf, diverging loss).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
    }
}
