//! Speech-conditioned motion diffusion: speech features, a synthetic corpus,
//! the fusion denoiser, training, guided long-sequence sampling and metrics.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod fusion_net;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod rotation;
pub mod sampler;
pub mod trainer;
pub mod types;
pub mod util;

pub use config::Config;
pub use error::{Error, Result};
pub use types::{ClipRecord, MotionSequence, SpeechFeatureSequence, StyleLabel};
