//! Training and analysis toolkit for comparing self-supervised and
//! externally pretrained backbones on small dermoscopy-style datasets.
//!
//! The crate is organised around one experiment shape: pretrain an
//! encoder as a variational autoencoder, reuse it as a frozen feature
//! extractor under a small classification head, and compare its training
//! dynamics against an externally pretrained twin of the same
//! architecture. All numerics are f64 and single threaded so that runs
//! reproduce bit for bit from a seed.

pub mod classify;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod vae;

pub use error::{Error, Result};
