//! Minimal reverse-mode automatic differentiation over dense row-major
//! matrices, sized for small transformer models trained on a single CPU core.
//!
//! Sequences of different lengths are stacked along the row axis and
//! described by `(start, len)` blocks, so no padding ever reaches a matmul.

mod graph;
pub mod nn;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{attention_probs, AttnSegment, Gradients, Graph, RelBias, Var};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use scalar::{s, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("graph was built without recording; backward is unavailable")]
    NotRecording,
}

pub type Result<T> = std::result::Result<T, Error>;
