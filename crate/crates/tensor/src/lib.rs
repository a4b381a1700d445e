//! Dense `f32` tensors, the layer kernels a small convolutional
//! encoder-decoder needs, and a tape that differentiates through them.
//!
//! ```
//! use fan_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let a = g.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
//! let b = g.input(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
//! let y = g.matmul(a, b).unwrap();
//! assert_eq!(g.value(y).item(), 11.0);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BnMode, Gradients, Graph, Var, BN_EPS, BN_MOMENTUM};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, BufferId, Param, ParamId, ParamStore};
pub use tensor::Tensor;
