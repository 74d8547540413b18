//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape rebuilt for every forward pass. Leaves are added with
//! [`Graph::param`] (trainable) or [`Graph::constant`]; every primitive
//! appends one node and returns its [`Var`]. [`Graph::backward`] then fills
//! in gradients for every trainable node reachable from a scalar root.
//!
//! ```
//! use hcrnn::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let root = g.sum(sq).unwrap();
//! g.backward(root).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod check;
mod graph;
mod tensor;

pub use check::{check_gradients, numeric_grad_check, relative_error};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
