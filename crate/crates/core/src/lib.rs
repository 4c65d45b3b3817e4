//! Channel-coding laboratory: a learned interleaved convolutional codec with
//! an iterative neural decoder, classical turbo baselines with exact BCJR
//! decoding, channel simulators, and Monte-Carlo BER/BLER measurement.

pub mod blocks;
pub mod channels;
pub mod classic;
pub mod error;
pub mod eval;
pub mod nn;
pub mod train;
pub mod turboae;

pub use blocks::{deinterleave, interleave, make_permutation, random_bits, BitBlock, Permutation, RealBlock, Rng};
pub use channels::{snr_to_sigma, ChannelKind, ChannelSpec};
pub use error::{Error, Result};
