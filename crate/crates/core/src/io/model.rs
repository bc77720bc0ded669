//! Trained model state: head, optional encoder and prototypes, and the
//! optimizer moments needed to resume.

use serde::{Deserialize, Serialize};

use crate::anchoring::PrototypeSet;
use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::trainer::{AdamState, LinearEncoder, LmclConfig, TrainConfig, TrainMode};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Head trained against the scene's frozen descriptors.
    Post,
    /// Encoder, prototypes and (optionally) head trained together.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub train: TrainConfig,
    pub lmcl: Option<LmclConfig>,
    pub head: HeadParams,
    pub encoder: Option<LinearEncoder>,
    pub prototypes: Option<PrototypeSet>,
    pub optimizers: Vec<AdamState>,
    pub best_epoch: usize,
    pub phase_two_start: Option<usize>,
}

impl ModelState {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported model schema {}", self.schema_version)));
        }
        self.head.validate()?;
        if self.kind == ModelKind::Joint && (self.encoder.is_none() || self.prototypes.is_none()) {
            return Err(Error::Config("joint model lacks encoder or prototypes".into()));
        }
        Ok(())
    }

    /// Whether the head was trained and its output is meaningful.
    pub fn head_trained(&self) -> bool {
        match self.train.mode {
            TrainMode::ClassificationOnly => false,
            TrainMode::JointTraining => self.train.lambda > 0.0,
            _ => true,
        }
    }

    /// The head output is a variance rather than a concentration.
    pub fn predicts_variance(&self) -> bool {
        self.train.mode == TrainMode::GnllVariant
    }
}
