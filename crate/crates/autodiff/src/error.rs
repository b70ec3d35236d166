use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("contract violated: {0}")]
    Contract(&'static str),
    #[error("non-finite gradient for parameter `{name}` (first bad index {index})")]
    NonFiniteGradient { name: String, index: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
