//! Chest X-ray disease classification with anatomy-masked attention features.
//!
//! The pipeline: a U-Net segments lungs and heart ([`segmentation`]), a
//! multi-scale spatial gate reweights the image ([`attention`]), a CNN
//! backbone produces a feature map that is zeroed outside the anatomy mask
//! ([`core_ops::feature_weight`]), and a pooled linear head predicts 14
//! findings ([`classifier`]). [`evaluation`] holds AUROC, ROC and CAM box
//! localisation.

pub mod attention;
pub mod backbone;
pub mod classifier;
pub mod core_ops;
pub mod data_pipeline;
pub mod evaluation;
pub mod fixtures;
mod error;
pub mod nn;
pub mod segmentation;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffling RNG for one epoch. Depends only on the seed and epoch number,
/// so a resumed run replays the same batches as an uninterrupted one.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}
