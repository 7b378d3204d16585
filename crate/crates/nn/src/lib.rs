//! A small reverse-mode automatic differentiation runtime.
//!
//! The runtime records operations on a [`Graph`] tape and replays them in
//! reverse to produce parameter gradients. It carries exactly the layers the
//! beamforming networks need: affine maps, PReLU, sigmoid/tanh, layer
//! normalization, dilated 1-D convolution and multi-layer GRUs, plus Adam and
//! global gradient-norm clipping.
//!
//! Everything is real valued. Complex quantities are represented by their
//! real and imaginary parts side by side, and domain-specific operators can be
//! plugged in through the [`Function`] trait.

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
mod layers;
mod ops;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{Checkpoint, Record, CHECKPOINT_MAGIC};
pub use error::{NnError, Result};
pub use graph::{Function, Gradients, Graph, Var};
pub use layers::{Conv1d, ConvMode, Gru, GruLayer, LayerNorm, Linear, PRelu};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
