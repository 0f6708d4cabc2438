//! Desk-scale laboratory for studying quantization noise in diffusion
//! samplers and the two correction passes that remove it: per-channel
//! smoothing of embedding-fused activations folded into weights, and
//! runtime estimation plus subtraction of sampling-step noise bias.

pub mod config;
pub mod correction;
pub mod denoiser;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod metrics;
pub mod quantizer;
pub mod rng;
pub mod schedule;
pub mod smoothing;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
