//! Probability model of the quantized latent, range coding and the stream container.

pub mod cdf;
pub mod container;
pub mod gaussian;
pub mod model;
pub mod range_coder;

pub use cdf::{QuantizedCdf, CDF_PRECISION, CDF_TOTAL};
pub use container::{parse, serialize, CompressedBitstream, StreamHeader};
pub use gaussian::{likelihood, likelihood_tensor, SIGMA_MIN};
pub use model::{compress_latent, decompress_latent, CompressedLatent, EntropyConfig, EntropyModel, RateEstimate};
pub use range_coder::{range_decode, range_encode, RangeDecoder, RangeEncoder};
