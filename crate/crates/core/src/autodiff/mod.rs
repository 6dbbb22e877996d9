//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{check_layout, from_json, to_json, OPTIM_KEY};
pub use graph::{Gradients, Graph, SamplePoint, Var};
pub use optim::AdamW;
pub use params::ParamStore;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("bilinear sample at ({u}, {v}) outside a {width}x{height} map")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests;
