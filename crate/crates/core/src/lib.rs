//! Fixed-point single-shot pedestrian detection toolchain.
//!
//! The crate is organised around the stages of an FPGA-oriented detector:
//!
//! * [`fxp`] signed Q-format arithmetic with saturation and rounding,
//! * [`tensor`] dense NCHW tensors in real or fixed-point form,
//! * [`nn`] direct convolution and the layer graph executed in either mode,
//! * [`ssd`] prior boxes, offset decoding, matching and NMS,
//! * [`quant`] post-training calibration and model quantization,
//! * [`tile`] loop tiling, traffic accounting, roofline and a tiled simulator,
//! * [`eval`] Caltech-style miss rate / FPPI evaluation,
//! * [`io`] tensor blobs, manifests, images and the text formats,
//! * [`fixture`] a seeded synthetic detector and dataset.
//!
//! Real-valued code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common instantiations.

pub mod error;
pub mod eval;
pub mod fixture;
pub mod fxp;
pub mod io;
pub mod nn;
pub mod quant;
pub mod scalar;
pub mod ssd;
pub mod tensor;
pub mod tile;

pub use error::{Error, Result};
pub use fxp::{DynamicRange, QFormat};
pub use scalar::Scalar;
pub use tensor::{Activation, FixedTensor, Shape, Tensor};

/// Single-precision real tensor, the default feature-map type.
pub type Tensor32 = Tensor<f32>;
/// Double-precision real tensor, used by oracles and reports.
pub type Tensor64 = Tensor<f64>;
/// Model executing real-mode arithmetic in `f32`.
pub type Model32 = nn::Model<f32>;
/// Model executing real-mode arithmetic in `f64`.
pub type Model64 = nn::Model<f64>;
/// Normalized or pixel-space box in `f64`.
pub type Box64 = ssd::BoundingBox<f64>;
/// Detection with an `f64` box and score.
pub type Detection64 = ssd::Detection<f64>;
