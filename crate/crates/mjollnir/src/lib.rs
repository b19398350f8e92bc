//! Global lightning flash-density parameterization toolkit.
//!
//! A self-contained implementation of an InceptionNeXt-style convolutional
//! backbone with dual occurrence/magnitude heads, a masked multi-task loss,
//! deterministic AdamW training, a binary gridded dataset format, and the
//! full gridded evaluation suite (correlation maps, regional scatter,
//! monthly climatologies, zonal profiles, hemispheric series).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod fwd;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod plot;
pub mod regions;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor4;
