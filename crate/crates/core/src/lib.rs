//! Supervised contrastive learning for conditional text-to-image GANs, at
//! toy scale.
//!
//! Pipeline: [`data`] generates labeled caption-image sets, [`sampling`]
//! draws same-label paired batches and positive masks, [`losses`] defines
//! the contrastive and adversarial objectives over a small reverse-mode
//! [`tensor`] tape, [`models`] holds the networks, [`trainer`] runs the
//! encoder pre-training and GAN phases, and [`metrics`] scores results.

pub mod data;
pub mod evaluation;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod sampling;
pub mod tensor;
pub mod trainer;
