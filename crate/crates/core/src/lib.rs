//! Expansion-mechanism encoder-decoder for set-to-sequence captioning.
//!
//! The crate is self-contained: a small f64 autodiff tensor engine, the
//! expansion layer (static and dynamic), multi-head cross-attention, the full
//! encoder-decoder model with greedy/beam/sampled decoding, CIDEr-D and BLEU
//! scoring, cross-entropy and self-critical training loops, and a synthetic
//! scene-caption dataset generator.

pub mod attention;
pub mod data;
pub mod error;
pub mod expansion;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
