//! Parallel temporal-spectral attention for environmental sound
//! classification: a log-mel frontend, a reverse-mode autodiff engine, the
//! CNN10 model family with temporal, spectral, parallel and serial attention,
//! training with mixup and SpecAugment, and a noise-robustness harness.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). Training
//! runs in `f32`; gradient checks and oracles run in `f64`.

pub mod attention;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod kernels;
pub mod manifest;
pub mod model;
pub mod ops;
pub mod robustness;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Axis, Gradients, Padding, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type LogMelFeature32 = frontend::LogMelFeature<f32>;
