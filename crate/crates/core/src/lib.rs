//! Noise-tolerant ensemble two-stage detection trained by alternating
//! detector retraining and pseudo-box mining.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: boxes, IoU, delta encoding, NMS, anchor matching.
//! - [`scene`]: the synthetic detection world, seed/weak splits, label noise.
//! - [`model`]: the miniature two-stage detector and its checkpoint format.
//! - [`losses`]: all training losses with hand-written reverse-mode gradients.
//! - [`mining`]: box mining from image-level labels.
//! - [`metrics`]: AP / mAP sweeps and mined-box precision / recall.
//! - [`trainer`]: momentum SGD, source pretraining and the training-mining loop.

pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{BBox, BoxDelta};
pub use model::{DetectorParams, ModelConfig, VariantFlags};
pub use scene::{AnnotationStore, LabeledBox, Scene, WorldConfig};
