//! Deep attractor network speech separation: signal processing, synthetic
//! data, the embedding network, attractor masking, and evaluation.

pub mod attractor;
pub mod audio_io;
pub mod bsseval;
pub mod dsp;
pub mod embednet;
pub mod harness;
mod error;
pub mod kv;
pub mod mixgen;

pub use error::{Error, Result};
