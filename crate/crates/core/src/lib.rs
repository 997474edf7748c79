//! Key-based attribution of generative speech models.
//!
//! Every user-end model is the default sample source plus a learned, clipped
//! additive watermark. Each user owns a key (unit direction plus bias) whose
//! linear classifier fires only on that user's outputs. This crate generates
//! the keys, trains the watermarks (optionally against sampled post-processing
//! attacks), measures distinguishability, attributability and spectrogram
//! quality, and keeps the registry that maps keys back to users.

pub mod attacks;
pub mod audio;
pub mod dsp;
pub mod error;
pub mod keygen;
pub mod mel;
pub mod metrics;
pub mod optim;
pub mod registry;
pub mod rng;
pub mod watermark;

pub use audio::{AudioClip, Dataset};
pub use error::{Error, Result};
pub use keygen::{Key, KeySet};

pub use watermark::{Lambdas, WatermarkModel};
