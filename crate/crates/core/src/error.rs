use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EchoError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("timestep {t} outside [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("timestep {t} is not on the grid with stride {stride}")]
    OffGrid { t: usize, stride: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("unknown condition label `{0}`")]
    UnknownCondition(String),

    #[error("non-finite latent at t={t} during {stage}")]
    NonFinite { t: usize, stage: &'static str },

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, EchoError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> EchoError {
    EchoError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
