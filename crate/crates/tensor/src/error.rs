use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Argument { op: &'static str, msg: String },
}

impl TensorError {
    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        TensorError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn arg(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Argument {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
