use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::BinningConfig;
use crate::error::Result;
use crate::latency::BenchConfig;
use crate::pipeline::EvalConfig;
use crate::scores::Method;
use crate::synth::SceneConfig;
use crate::trainer::{LmclConfig, TrainConfig};

/// Everything a CLI run needs. Missing sections take their defaults;
/// unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub lmcl: LmclConfig,
    pub binning: BinningConfig,
    pub ks: Vec<usize>,
    pub methods: Vec<Method>,
    pub sue_k: usize,
    pub uncertainty_cap: f64,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            lmcl: LmclConfig::default(),
            binning: e.binning,
            ks: e.ks,
            methods: e.methods,
            sue_k: e.sue_k,
            uncertainty_cap: e.uncertainty_cap,
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = super::read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()?;
        self.lmcl.validate()?;
        self.bench.validate()?;
        self.eval().validate()
    }

    /// Sets the seed of every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.train.seed = seed;
        self.bench.seed = seed;
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            ks: self.ks.clone(),
            binning: self.binning,
            methods: self.methods.clone(),
            sue_k: self.sue_k,
            uncertainty_cap: self.uncertainty_cap,
        }
    }
}
