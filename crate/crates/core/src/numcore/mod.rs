//! Dense matrices, a reverse-mode differentiable graph, the Adam optimizer
//! and seeded Gaussian sampling.

mod graph;
mod optim;
mod rng;
mod tensor;

pub use graph::{
    check_gradients, Feeds, GradCheck, Gradients, Graph, NodeId, ParamStore, Session,
    GRAD_CHECK_FLOOR,
};
pub use optim::{Adam, AdamConfig};
pub use rng::{gaussian, Rng, RngState};
pub use tensor::Tensor;


#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape error at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("no value fed for input '{0}'")]
    MissingInput(String),
    #[error("non-finite value produced at {0}")]
    NonFinite(String),
    #[error("backward called before a successful forward pass")]
    NotEvaluated,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
