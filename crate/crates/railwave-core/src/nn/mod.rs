//! Minimal dense-tensor engine: forward and backward passes for every layer
//! the classifier needs, plus SGD and a finite-difference gradient checker.
//!
//! There is no autodiff graph. Each op is a pair of free functions,
//! `op(...)` and `op_backward(...)`; the backward accumulates into the
//! `grad` buffers of its inputs and parameters. Parameters live on the f32
//! grid (the checkpoint dtype) while all arithmetic runs in f64.

mod bn;
mod conv;
mod gradcheck;
mod linear;
mod loss;
mod pool;
mod relu;
mod sgd;
mod tensor;

pub use bn::{batchnorm2d, batchnorm2d_backward, batchnorm2d_eval, BatchNormCache, BatchNormParams};
pub use conv::{conv2d, conv2d_backward, ConvParams};
pub use gradcheck::{grad_check, grad_check_directional, GradCheckReport};
pub use linear::{linear, linear_backward, LinearParams};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
pub use pool::{pool2d, pool2d_backward, PoolCache, PoolMode, PoolParams};
pub use relu::{relu, relu_backward};
pub use sgd::sgd_step;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-positive output dimension in {op}: {detail}")]
    NonPositiveOutputDim { op: &'static str, detail: String },
    #[error("degenerate batch: {m} value(s) per channel, need at least 2")]
    DegenerateBatch { m: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("missing gradient on {0}")]
    MissingGradient(String),
    #[error("bad tensor: {0}")]
    BadTensor(String),
}

fn shape_mismatch(op: &'static str, detail: String) -> NnError {
    NnError::ShapeMismatch { op, detail }
}

/// Extracts a rank-4 shape or reports which operand was malformed.
fn dims4(t: &Tensor, op: &'static str, what: &str) -> Result<[usize; 4], NnError> {
    match t.shape[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(shape_mismatch(
            op,
            format!("{what} must be rank 4, got shape {:?}", t.shape),
        )),
    }
}

fn dims2(t: &Tensor, op: &'static str, what: &str) -> Result<[usize; 2], NnError> {
    match t.shape[..] {
        [a, b] => Ok([a, b]),
        _ => Err(shape_mismatch(
            op,
            format!("{what} must be rank 2, got shape {:?}", t.shape),
        )),
    }
}
