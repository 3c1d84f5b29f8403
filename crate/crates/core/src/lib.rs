//! Volumetric image codec built on learned affine lifting transforms,
//! learned entropy models and a bit-exact range coder.

pub mod codec;
pub mod coder;
pub mod entropy;
pub mod error;
pub mod lifting;
pub mod nn;
pub mod par;
pub mod quant;
pub mod train;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use volume::Volume;
