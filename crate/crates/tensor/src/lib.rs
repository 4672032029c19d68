//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]s; computations are recorded on a [`Tape`]
//! and differentiated with [`Tape::backward`]. Trainable weights are kept
//! in a [`ParamStore`] and updated with [`Adam`]. The op set is closed over
//! what small 3D convolutional networks and vector quantizers need:
//! strided and transposed 3D convolution, elementwise arithmetic, SiLU,
//! group normalization, means, MSE, matrix products, channel bias and
//! concatenation, embedding lookup, straight-through routing and
//! user-supplied linear operators.

mod conv;
mod element;
mod error;
mod optim;
mod params;
mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod init;

pub use conv::ConvGeom;
pub use element::Element;
pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, LinearOperator, Tape, Var, GROUP_NORM_EPS};
pub use tensor::Tensor;
