//! Video-language pre-training for surgical video at desk scale: dual
//! encoders with divided space-time attention, video-to-text fusion, the
//! contrastive/matching/masked-language objectives, a curation pipeline for
//! narrated videos, and zero-shot phase recognition.

pub mod archive;
pub mod autograd;
pub mod error;
pub mod frames;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
