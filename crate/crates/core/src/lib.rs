//! Cross-modal low-rank adaptation for dual-encoder classifiers.
//!
//! Two frozen transformer towers (vision and text) are adapted with
//! low-rank updates whose shared part is coupled across towers through r×r
//! Gram matrices. Everything needed to train, merge and analyze the
//! adapters is here: a small reverse-mode autodiff tape, the encoders, a
//! synthetic paired dataset with controllable missing modalities, and the
//! training loop.

pub mod adapters;
pub mod analysis;
pub mod autodiff;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
