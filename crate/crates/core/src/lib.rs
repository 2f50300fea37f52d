//! Desk-scale sequence-to-sequence training laboratory.
//!
//! Everything numeric lives here: a small reverse-mode autodiff tape over
//! dense `f64` tensors, an attention-based LSTM encoder-decoder, the
//! training regimes (teacher forcing, free running, scheduled sampling,
//! vanilla and automatic attention forcing), beam/sampling decoding, and
//! the BLEU / pairwise-BLEU / entropy evaluation metrics.
//!
//! The crate is `no_std` + `alloc`; file formats, configuration and the
//! command-line surface live in the companion `seqlab-cli` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(any(feature = "std", test))]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod regimes;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
