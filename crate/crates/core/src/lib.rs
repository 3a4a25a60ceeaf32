//! Synthetic bedroom scenes, an image captioner, and a multi-scale
//! text-conditioned GAN trained on machine-generated captions.

pub mod captioner;
pub mod error;
pub mod gan;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod scene;
pub mod text;

pub use error::{Error, Result};
