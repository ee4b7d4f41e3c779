//! Non-local Bayesian patch denoising with classical and learned Gaussian priors.

pub mod autonet;
pub mod bayes;
pub mod error;
pub mod imaging;
pub mod nonlocal;
pub mod pipeline;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Image32 = imaging::Image<f32>;
pub type Image64 = imaging::Image<f64>;
pub type Tensor32 = autonet::Tensor<f32>;
pub type Tensor64 = autonet::Tensor<f64>;
pub type Prior32 = bayes::GaussianPrior<f32>;
pub type Prior64 = bayes::GaussianPrior<f64>;
pub type ParamStore32 = autonet::ParamStore<f32>;
pub type ParamStore64 = autonet::ParamStore<f64>;
