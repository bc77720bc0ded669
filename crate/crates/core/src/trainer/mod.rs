//! Optimization of the κ-head (post-training) or of encoder, prototypes and
//! head together (joint training).

pub mod adam;
pub mod encoder;
pub mod fdcheck;
pub mod gnll;
mod joint;
pub mod lmcl;
mod post;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use encoder::LinearEncoder;
pub use fdcheck::{finite_diff_check, FdReport};
pub use gnll::gnll_loss;
pub use joint::{train_joint, JointOutcome, JointSample};
pub use lmcl::{lmcl_loss, LmclConfig};
pub use post::{train_post, PostOutcome, PostSample};

use serde::{Deserialize, Serialize};

use crate::anchoring::AnchorMode;
use crate::error::{Error, Result};
use crate::head::HeadVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Only the κ-head learns, against frozen descriptors.
    #[default]
    PostTraining,
    /// Encoder, prototypes and head under `L_cls + λ·L_vMF`.
    JointTraining,
    /// Encoder and prototypes under `L_cls` alone.
    ClassificationOnly,
    /// Post-training with the Gaussian NLL; the head predicts σ².
    GnllVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Weight of the vMF term in joint training.
    pub lambda: f64,
    /// Head learning rate.
    pub lr: f64,
    /// Encoder and prototype learning rate in joint training.
    pub joint_lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub anchor_mode: AnchorMode,
    /// Count a sample among its own positives in batch-centroid mode.
    pub include_self_in_centroid: bool,
    /// Fraction of training images held out for early stopping.
    pub validation_fraction: f64,
    pub head_variant: HeadVariant,
    pub hidden: usize,
    pub train_gem_p: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::PostTraining,
            lambda: 0.01,
            lr: 1e-3,
            joint_lr: 1e-4,
            batch_size: 32,
            patience: 15,
            max_epochs: 300,
            seed: 0,
            anchor_mode: AnchorMode::ClassPrototype,
            include_self_in_centroid: false,
            validation_fraction: 0.1,
            head_variant: HeadVariant::Aggregation,
            hidden: crate::head::DEFAULT_HIDDEN,
            train_gem_p: false,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0 && self.joint_lr >= 0.0) {
            return bad("learning rates must be ≥ 0".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Validation metrics reported by an evaluation hook after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub recall_at_1: f64,
    pub ece_at_1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Tracks Recall@1.
    Recall,
    /// Tracks ECE@1.
    Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_vmf: f64,
    pub loss_cls: f64,
    pub recall_at_1: f64,
    pub ece_at_1: f64,
    /// Digest of all trainable parameters after the epoch.
    pub param_hash: String,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,phase,loss_vmf,loss_cls,recall_at_1,ece_at_1,param_hash\n");
    for r in rows {
        let phase = match r.phase {
            Phase::Recall => "recall",
            Phase::Calibration => "calibration",
        };
        s.push_str(&format!(
            "{},{phase},{},{},{},{},{}\n",
            r.epoch, r.loss_vmf, r.loss_cls, r.recall_at_1, r.ece_at_1, r.param_hash
        ));
    }
    s
}

/// Patience-based tracker of the best value seen so far.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStop {
    best: f64,
    best_epoch: usize,
    since: usize,
    patience: usize,
    maximize: bool,
}

impl EarlyStop {
    pub(crate) fn new(patience: usize, maximize: bool) -> Self {
        Self {
            best: if maximize { f64::NEG_INFINITY } else { f64::INFINITY },
            best_epoch: 0,
            since: 0,
            patience,
            maximize,
        }
    }

    /// Records a value; returns true when it is a new best.
    pub(crate) fn observe(&mut self, epoch: usize, value: f64) -> bool {
        let better = if self.maximize {
            value > self.best
        } else {
            value < self.best
        };
        if better {
            self.best = value;
            self.best_epoch = epoch;
            self.since = 0;
        } else {
            self.since += 1;
        }
        better
    }

    pub(crate) fn exhausted(&self) -> bool {
        self.since >= self.patience
    }

    pub(crate) fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Deterministic batch order for an epoch.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_counts_patience() {
        let mut s = EarlyStop::new(2, true);
        assert!(s.observe(0, 0.5));
        assert!(!s.observe(1, 0.5));
        assert!(!s.exhausted());
        assert!(!s.observe(2, 0.4));
        assert!(s.exhausted());
        assert_eq!(s.best_epoch(), 0);
        let mut m = EarlyStop::new(1, false);
        m.observe(0, 0.3);
        assert!(m.observe(1, 0.2));
        assert_eq!(m.best_epoch(), 1);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 0.1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"lambda": 0.1}"#).unwrap();
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.patience, 15);
    }
}
