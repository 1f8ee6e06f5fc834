//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Operations are methods on [`Tape`]; each records its output together
//! with an exact vector-Jacobian product. [`Tape::backward`] replays the
//! tape in reverse from a scalar loss.
//!
//! ```
//! use dcim_core::autodiff::Tape;
//! use dcim_core::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod conv;
pub(crate) mod kernels;
mod nn_ops;
mod ops;
mod tape;

pub use tape::{Gradients, Tape, Var};
