//! Camera pose regression with a self-supervised colorization auxiliary task.
//!
//! The localization network regresses translation and a log-quaternion from
//! an RGB image. A U-Net colorizer predicts the Lab chroma planes from the
//! lightness plane; its bottleneck features are fused into the localization
//! features, re-weighted by a channel/spatial attention module, and both
//! tasks are trained jointly.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below fix the precision.

pub mod colorspace;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod posemath;
pub mod scalar;
pub mod seed;
pub mod synthscene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Pose64 = posemath::Pose<f64>;
pub type Quaternion64 = posemath::Quaternion<f64>;
pub type LabImage64 = colorspace::LabImage<f64>;
pub type RgbImage64 = image::RgbImage<f64>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ParamStore64 = model::ParamStore<f64>;
