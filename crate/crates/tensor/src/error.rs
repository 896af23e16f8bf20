use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("softmax slice {index} along axis {axis} has no unmasked entry")]
    DegenerateMask { axis: usize, index: usize },

    #[error("backward needs a scalar (1x1) loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph node {node} consumes node {input}, which was not recorded before it")]
    Cycle { node: usize, input: usize },

    #[error("gradients from a previous backward pass are still present; call zero_grad first")]
    GradAccumulation,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        TensorError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Invalid {
            op,
            reason: reason.into(),
        }
    }
}
