use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("gradients already populated; step the optimizer or reset before calling backward again")]
    GradientsAlreadyPopulated,

    #[error("gradients not populated; run backward before stepping the optimizer")]
    GradientsNotPopulated,

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error("parameter {0} already defined")]
    DuplicateParameter(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("computation record is empty")]
    EmptyRecord,

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
