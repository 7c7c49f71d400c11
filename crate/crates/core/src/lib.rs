//! Post-training vector quantization of dense weight matrices guided by a
//! second-order (Hessian) proxy of the layer loss.
//!
//! The pipeline: accumulate a proxy Hessian from calibration activations
//! ([`hessian`]), train Hessian-weighted k-means codebooks ([`codebook`]),
//! quantize column by column with error feedback ([`quantizer`]), then pack
//! indices into a checksummed container ([`packing`]).

pub mod codebook;
pub mod error;
pub mod hessian;
pub mod linalg;
pub mod packing;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::TensorF32;
