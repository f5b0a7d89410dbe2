//! The three training phases and their optimizers.
//!
//! Phase 1 trains the embedding network with the sigmoid head as a binary
//! peak / non-peak classifier. Phase 2 drops the head and refines the
//! embedding with semi-hard-mined triplets. Phase 3 adapts the two
//! fully-connected layers (everything else frozen) to a newly registered
//! exercise with Rectified Adam at a small learning rate.
//!
//! All phases are bit-reproducible for a fixed (seed, config, corpus):
//! shuffling, dropout, and mining order all derive from the phase seed, and
//! per-item gradients are reduced in batch index order.

mod losses;
mod mining;
mod optim;
mod phases;

pub use losses::{bce_loss, sq_dist, triplet_loss};
pub use mining::{batch_triplet_loss, mine_semi_hard, pairwise_sq_dists, MiningBranch, Triplet};
pub use optim::{adam_step, radam_step, OptimState, BETA1, BETA2, EPSILON};
pub use phases::{
    fine_tune_phase3, phase1_gradient, phase2_gradient, subsample_balanced, train_phase1,
    train_phase2, EpochStats,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary-classification pre-training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl Phase1Config {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "phase 1 learning rate and weight decay must be nonnegative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "phase 1 batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Triplet training with semi-hard mining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Config {
    pub epochs: usize,
    /// Class-balanced: each batch holds up to half of this per class.
    pub batch_size: usize,
    pub margin: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            epochs: 30,
            batch_size: 64,
            margin: 1.0,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl Phase2Config {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::InvalidArgument(
                "phase 2 batches need at least 2 windows per class".into(),
            ));
        }
        if !(self.margin >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::InvalidArgument(
                "phase 2 margin and learning rate must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Few-shot fine-tuning of the FC layers on registration windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase3Config {
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for Phase3Config {
    fn default() -> Self {
        Phase3Config {
            epochs: 15,
            lr: 5e-5,
            margin: 1.0,
            seed: 0,
        }
    }
}
