//! Per-row metadata of a descriptor bank.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{DescriptorBank, GroundTruth, DEFAULT_THRESHOLD};
use crate::synth::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub poses: Option<Vec<[f64; 2]>>,
    pub true_kappa: Option<Vec<f64>>,
    pub kappas: Option<Vec<f64>>,
    pub split: Vec<Split>,
    /// Query id → positive reference ids; required when poses are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positives: Option<BTreeMap<u64, BTreeSet<u64>>>,
    /// Pose distance under which a reference counts as positive.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl Manifest {
    pub fn from_bank(bank: &DescriptorBank, split: Vec<Split>, threshold: f64) -> Self {
        Self {
            ids: bank.ids().to_vec(),
            labels: bank.labels().to_vec(),
            poses: bank.poses().map(|p| p.to_vec()),
            true_kappa: bank.true_kappa().map(|k| k.to_vec()),
            kappas: bank.kappas().map(|k| k.to_vec()),
            split,
            positives: None,
            threshold,
        }
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        let check = |n: usize, what: &str| -> Result<()> {
            if n != count {
                return Err(Error::Shape(format!("manifest {what} has {n} entries, bank has {count} rows")));
            }
            Ok(())
        };
        check(self.ids.len(), "ids")?;
        check(self.labels.len(), "labels")?;
        check(self.split.len(), "split")?;
        if let Some(p) = &self.poses {
            check(p.len(), "poses")?;
        }
        if let Some(k) = &self.true_kappa {
            check(k.len(), "true_kappa")?;
        }
        if let Some(k) = &self.kappas {
            check(k.len(), "kappas")?;
        }
        if self.poses.is_none() && self.positives.is_none() {
            return Err(Error::Config("manifest without poses must list explicit positives".into()));
        }
        Ok(())
    }

    /// Combines this metadata with decoded bank rows.
    pub fn into_bank(&self, dim: usize, rows: Vec<f64>) -> Result<DescriptorBank> {
        self.validate(rows.len() / dim.max(1))?;
        let mut bank = DescriptorBank::from_flat(dim, rows, self.ids.clone(), self.labels.clone(), self.poses.clone())?;
        if let Some(k) = &self.true_kappa {
            bank = bank.with_true_kappa(k.clone())?;
        }
        if let Some(k) = &self.kappas {
            bank = bank.with_kappas(k.clone())?;
        }
        Ok(bank)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.split.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn ground_truth(&self) -> GroundTruth {
        match &self.positives {
            Some(p) => GroundTruth::ExplicitPositives(p.clone()),
            None => GroundTruth::DistanceThreshold(self.threshold),
        }
    }
}
