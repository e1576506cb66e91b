//! Minimal dense-tensor reverse-mode differentiation.
//!
//! A [`Tape`] records primitive applications in topological order while
//! evaluating them eagerly. The primitive set is deliberately small: add, mul,
//! matmul, transpose, reshape, last-axis concat/slice, sum/mean, sqrt, exp,
//! log, relu, silu, layer-normalize, softmax and pairwise Euclidean distance,
//! plus a stop-gradient marker. Broadcasting is limited to a `[1, n]` row
//! operand against a `[r, n]` matrix.
//!
//! ```
//! use celldiff_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.input(Tensor::scalar(3.0)).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.grad(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

mod check;
mod tape;
mod tensor;

pub use check::{analytic_gradient, check_gradients};
pub use tape::{Gradients, Op, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
