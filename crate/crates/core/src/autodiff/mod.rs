//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations eagerly. [`Graph::grad`] appends the
//! adjoint computation to the same graph, so a gradient is itself a graph
//! node and can be differentiated again. This is what the MAML outer
//! update needs: the loss after an inner gradient step is differentiated
//! through that step.
//!
//! ```
//! use metareg::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::scalar(3.0)).unwrap();
//! let y = g.mul(w, w).unwrap();
//! let dy = g.grad(y, &[w]).unwrap()[0];
//! assert_eq!(g.scalar(y), 9.0);
//! assert_eq!(g.scalar(dy), 6.0);
//! let d2y = g.grad(dy, &[w]).unwrap()[0];
//! assert_eq!(g.scalar(d2y), 2.0);
//! ```

mod backward;
mod graph;
mod tensor;
mod unroll;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
pub use unroll::{descent_step, grad_through_update, Hypergradient};
