//! Boundary-aware volumetric segmentation: a small reverse-mode tensor engine,
//! an encoder-decoder network with an attention-gated boundary stream,
//! edge-aware losses, a synthetic-phantom data pipeline, training with
//! bit-exact checkpoints, and TTA/ensemble inference.

pub mod autodiff;
pub mod boundary_net;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
mod kernels;
pub mod layers;
pub mod losses;
pub mod tensor;
pub mod training;

pub use autodiff::{Activation, Elementwise, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
