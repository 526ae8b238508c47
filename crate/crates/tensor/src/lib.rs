//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! The crate covers exactly the operator set a small residual CNN needs:
//! `conv2d` (stride 1, "same" zero padding), `batchnorm2d`, `relu`,
//! `maxpool2d` (2x2, stride 2, floor), `dropout`, `flatten`, `dense`,
//! `softmax`, elementwise `add`/`mul`, reductions and a clamped categorical
//! cross-entropy.
//!
//! Values live in [`Tensor`], a row-major buffer with a shape. Differentiation
//! happens on a [`Graph`], an append-only tape: every op pushes a node that
//! refers to its parents by [`Var`] index, so the node order is already a
//! topological order and [`Graph::backward`] walks it in reverse.
//!
//! ```
//! use wingbeat_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.param(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.mul(w, w).unwrap();
//! let s = g.sum(sq);
//! let loss = g.scale(s, 0.5);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap().data(), &[1.0, -2.0, 0.5]);
//! ```

mod error;
mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BatchStats, Graph, Mode, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
