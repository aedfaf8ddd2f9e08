//! Learned image compression with a Haar wavelet frontend, space/channel
//! window attention blocks, a channel-wise autoregressive entropy model, and
//! a range-coded bitstream.
//!
//! The crate is organized bottom-up:
//!
//! - [`autograd`] — reverse-mode tape over `ndarray` tensors (f32/f64)
//! - [`wavelet`] — Haar DWT/IDWT used as the codec's fixed resampler
//! - [`nn`] — parameterized layers (convolutions, linear, layer norm, MLP)
//! - [`attention`] — window partitioning and the two attention modules
//! - [`blocks`] — residual blocks (RB/RBS/RBU) and the space-channel hybrid block
//! - [`autoencoder`] — analysis/synthesis transforms
//! - [`entropy`] — hyper-prior, slice predictors, rate estimation
//! - [`codec`] — quantization, range coder, bitstream, encode/decode
//! - [`training`] — RD loss, optimizer loop, crops, checkpoints
//! - [`analysis`] — PSNR, BD-rate, receptive-field and attention-map probes
//!
//! See the `sch` binary for the command-line surface.

pub mod analysis;
pub mod attention;
pub mod autoencoder;
pub mod autograd;
pub mod blocks;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod synthetic;
pub mod training;
pub mod wavelet;

pub use error::{Result, SchError};
