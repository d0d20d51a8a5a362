//! MNA-net: patch-based MRI/PET attention-fusion 3D CNN for predicting conversion
//! from cognitively normal to MCI/AD, with the tensor core, preprocessing, staged
//! training and evaluation it needs.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
