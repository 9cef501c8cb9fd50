//! Reverse-mode automatic differentiation with gradients of gradients.
//!
//! Graphs are built eagerly: every operation on a [`Var`] computes its value
//! immediately and records its parents. [`gradient`] walks the recorded graph
//! backwards and expresses every adjoint as new [`Var`] nodes, so the result
//! can itself be differentiated. This is what lets a meta-learner unroll
//! inner gradient steps and take second-order outer gradients.
//!
//! ```
//! use autodiff::{gradient, Tensor, Var};
//!
//! let x = Var::param(Tensor::scalar(2.0));
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x³
//! let dy = gradient(&y, &[x.clone()]).unwrap().remove(0);
//! let d2y = gradient(&dy, &[x]).unwrap().remove(0);
//! assert_eq!(dy.value().item().unwrap(), 12.0);
//! assert_eq!(d2y.value().item().unwrap(), 12.0);
//! ```

mod error;
mod graph;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{gradient, Var};
pub use tensor::Tensor;
