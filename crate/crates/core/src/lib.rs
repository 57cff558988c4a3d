//! Group diffusion transformers at desk scale.
//!
//! A group of `n` images is denoised jointly: image tokens of every member
//! share one self-attention, so correlations between members (identity,
//! palette, lighting) can be learned without a dedicated module or any new
//! parameters. Reference-conditioned generation regenerates the rest of a
//! group from `m < n` given members, either by channel concatenation
//! (trainable inpainting) or by re-noising the references at every step.
//!
//! The numeric code is generic over [`Scalar`] (f32 or f64); the aliases
//! below name the two concrete instantiations.

pub mod attention;
pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Params32 = model::ParamStore<f32>;
pub type Params64 = model::ParamStore<f64>;
pub type Model32 = model::GdtModel<f32>;
pub type Model64 = model::GdtModel<f64>;
