//! Communication compression: quantization, sparsification, and the binary
//! payload format used for every simulated transfer.

mod payload;
mod quantize;
mod sparse;

use thiserror::Error;

use crate::linalg::LinalgError;

pub use payload::{
    decode_payload, dense_bits, encode_payload, encode_payload_with_rng, payload_bits,
    CodecConfig, CompressedPayload, QuantSegment, Scheme, TensorBody, TensorSegment,
    FORMAT_VERSION, HEADER_BITS, MAGIC,
};
pub use quantize::{
    dequantize, quantize, quantize_stochastic, quantize_with, QuantizedVector, RoundingMode,
    MAX_BITS, MIN_BITS,
};
pub use sparse::{sparsify_threshold, sparsify_topk, topk_indices, Sparsifier, SparseTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("cannot quantize a zero vector")]
    ZeroVector,
    #[error("bit width {0} outside 1..=32")]
    BadBits(u8),
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, CodecError>;
