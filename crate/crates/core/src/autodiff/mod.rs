//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every kernel applied during one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns [`Gradients`],
//! which are then folded into the [`ParamStore`]. The tape is dropped after
//! backward; each training step builds a fresh one.

mod array;
mod gradcheck;
mod graph;
mod nn;
mod params;

pub use array::{Array, Real};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use nn::lstm_cell;
pub(crate) use nn::lstm_step;
pub use params::{xavier_uniform, ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests;


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("array of shape {shape:?} cannot hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("objective is not finite: {0}")]
    NonFinite(f64),
}
