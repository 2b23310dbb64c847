//! Discretized-bottleneck variational autoencoder for token sequences.
//!
//! The crate is self-contained: a small reverse-mode tape ([`tape`]), LSTM
//! and linear layers ([`nn`]), sliced vector-quantization codebooks
//! ([`codebook`]), the model itself ([`model`]), corpus handling ([`data`]),
//! checkpoints ([`checkpoint`]) and the training loop ([`train`]).

pub mod checkpoint;
pub mod codebook;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
