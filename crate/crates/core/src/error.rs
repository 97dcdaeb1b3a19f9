use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unbound graph input `{0}`")]
    UnboundInput(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("output is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("replay buffer is empty")]
    EmptyReplay,

    #[error("invalid model spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, Error>;
