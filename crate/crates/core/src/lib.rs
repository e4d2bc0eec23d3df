//! Local-global vision Mamba: selective state-space scans over image tokens.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndtensor`]: strided channel-last tensors and primitive kernels;
//! * [`autodiff`]: a reverse-mode tape over those kernels plus a
//!   finite-difference checker;
//! * [`s6`]: the input-dependent state-space scan (sequential and chunked
//!   parallel forms) with an analytic adjoint;
//! * [`extract`]: token extractors (vanilla, local window unfolding, global
//!   channel-group compression), concatenation strategies and scan orders;
//! * [`blocks`]: the gated vision-Mamba block in its four extractor variants;
//! * [`segmodel`]: a small U-shaped segmentation network built from the blocks;
//! * [`train`]: losses, Adam, metrics, synthetic tasks, the training loop and
//!   effective-receptive-field maps;
//! * [`checks`]: gradient-check suites over ops, blocks and the model.
//!
//! All numerics are generic over [`Scalar`]; `f64` is the working precision
//! and has aliases below.

pub mod autodiff;
pub mod blocks;
pub mod checks;
pub mod error;
pub mod extract;
pub mod ndtensor;
pub mod rng;
pub mod s6;
pub mod scalar;
pub mod segmodel;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type TensorF64 = ndtensor::Tensor<f64>;
pub type TensorF32 = ndtensor::Tensor<f32>;
pub type GraphF64 = autodiff::Graph<f64>;
pub type ParamSetF64 = autodiff::ParamSet<f64>;
pub type S6ParamsF64 = s6::S6Params<f64>;
pub type ModelWeightsF64 = segmodel::ModelWeights<f64>;
