//! Dual-scale audio-visual target speaker extraction.
//!
//! The mixture is encoded by a learnable strided convolution, split into
//! half-overlapping chunks whose hop matches the visual cue frame rate, and
//! processed by intra-chunk self-attention, chunk-level cross-attention from
//! the visual cue into the audio, and inter-chunk self-attention. The
//! resulting chunked mask is overlap-added, applied to the mixture encoding,
//! and decoded by a transposed convolution.

pub mod error;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};

pub mod chunking;
pub mod config;
pub mod frontend;
pub mod posenc;
pub mod visualcue;
pub mod wav;

pub use config::{MaskActivation, ModelConfig};
pub mod attention;
pub mod checkpoint;
pub mod datagen;
pub mod model;
pub mod params;
pub mod separator;
pub mod signal;
pub mod training;
pub mod verify;
