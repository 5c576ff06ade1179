//! Video saliency prediction with a high-temporal-dimension decoder.
//!
//! A windowed-attention video encoder produces a four-level feature pyramid.
//! The levels are projected, upsampled and summed at a quarter of the frame
//! resolution with time kept at half the clip length. A deep 3D convolutional
//! decoder then reduces time gradually while restoring full resolution,
//! ending in a sigmoid saliency map for the last frame of the clip.
//!
//! Everything runs on a small CPU tensor engine with tape-based reverse-mode
//! autodiff ([`autograd::Graph`]), generic over `f32` and `f64`.

pub mod autograd;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
