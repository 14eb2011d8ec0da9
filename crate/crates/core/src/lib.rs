//! Desk-scale knowledge distillation with attention-based layer projection.
//!
//! A small transformer encoder (teacher or student), the family of
//! intermediate-layer distillation objectives (soft-label KD, skip matching,
//! concatenation fusion and attention fusion of teacher layers), a training
//! and grid-search harness, and analysis exporters.
//!
//! Numeric code is generic over [`Scalar`]; the `*64` aliases below are the
//! default precision, with `*32` available for faster sweeps.

pub mod alignment;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod scalar;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
