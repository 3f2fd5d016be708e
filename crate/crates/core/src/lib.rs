//! Link-level simulator for codebook-assisted semantic image transmission.
//!
//! A caption and a saliency map travel over two independent noisy links: the
//! caption through a learned transformer codec, the map through a
//! convolutional codec whose latent is replaced by codebook indices.

pub mod assign;
pub mod channel;
pub mod codec_train;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pgm;
pub mod pipeline;
pub mod saliency;
pub mod text;
pub mod vq;

pub use error::{Error, Result};
