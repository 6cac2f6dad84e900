//! Ultra-widefield retinal screening pipeline.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the command-line driver.

pub mod archive;
pub mod data;
pub mod domain;
pub mod error;
pub mod explain;
pub mod frequency;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod spatial;
pub mod synth;
pub mod tensor;

pub use domain::Domain;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Working precision of the command-line pipeline.
pub type Real = f32;

pub type Image32 = image::Image<f32>;
pub type Image64 = image::Image<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
