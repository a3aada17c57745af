//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation as it runs (define-by-run). Calling
//! [`Tape::backward`] on a scalar result replays the record in reverse and
//! returns gradients for every parameter registered with [`Tape::param`].
//! Tapes are rebuilt for every training step.
//!
//! ```
//! use sdrelab::diffcore::{DenseArray, ParamId, Tape};
//!
//! let mut tape = Tape::new();
//! let p = tape.param(ParamId(0), &DenseArray::from_vec(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(ParamId(0)).unwrap().values(), &[2.0, 4.0, 6.0]);
//! ```

mod array;
mod check;
mod tape;

pub use array::DenseArray;
pub use check::finite_diff_check;
pub use tape::{backward, Gradients, ParamId, Primitive, Tape, Var};

use thiserror::Error;

/// Layernorm epsilon used by the networks.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} needs {expected} values, got {got}")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("log of nonpositive value {value} at index {index}")]
    LogDomain { index: usize, value: f64 },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {detail}")]
    InvalidAttr { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
