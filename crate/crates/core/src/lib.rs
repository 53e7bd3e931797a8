//! Selective state-space (S6) layers and Mamba-augmented 3-D U-Nets for
//! volumetric segmentation, on top of a small reverse-mode autodiff engine.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor, Tape, Var};
pub mod nn;
pub mod ssm;
pub mod layers;
pub mod unet;
pub mod train;
pub mod metrics;
pub mod synth;
pub mod volume;
pub mod checkpoint;
