//! Monaural speech separation for an unknown number of speakers.
//!
//! The separator encodes a waveform with a learned convolutional front end,
//! models it with a dual-path LSTM-attention block, derives one attractor
//! per speaker from learned queries with a transformer decoder, conditions
//! the mixture embedding on each attractor (FiLM), refines the result with
//! triple-path blocks (intra-chunk, inter-chunk, inter-speaker) and decodes
//! every speaker back to a waveform.

pub mod blocks;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod objectives;
pub mod signal;
pub mod tda;
pub mod training;

pub use error::{Error, Result};
