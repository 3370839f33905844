//! Illuminant estimation with a center-surround network and a stacked
//! refinement network, trained stage by stage on CPU.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for common uses.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod color;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod io;
pub mod nets;
pub mod nn;
pub mod sampling;
pub mod scalar;
pub mod training;

pub use color::Illuminant;
pub use error::{Error, Result};
pub use image::LinearImage;
pub use scalar::Real;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = nets::IlluminantModel<f32>;
pub type Model64 = nets::IlluminantModel<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type PatchPair32 = sampling::PatchPair<f32>;
pub type PatchPair64 = sampling::PatchPair<f64>;
pub type TrainingSample32 = training::TrainingSample<f32>;
pub type TrainingSample64 = training::TrainingSample<f64>;
