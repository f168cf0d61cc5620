//! A small dense-tensor library with reverse-mode automatic differentiation.
//!
//! Computations are recorded on a [`Graph`]; [`Graph::backward`] walks the
//! record in reverse and accumulates gradients into leaves. Trainable weights
//! live in a [`ParamSet`] and are updated by [`AdamState`].
//!
//! ```
//! use lwpt_autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod composite;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use optim::{AdamConfig, AdamState, Param, ParamId, ParamSet};
pub use tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
