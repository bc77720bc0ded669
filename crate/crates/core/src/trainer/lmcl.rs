//! Large Margin Cosine Loss: softmax cross-entropy over `s·(cos θ_j − m·[j = y])`.

use serde::{Deserialize, Serialize};

use crate::anchoring::PrototypeSet;
use crate::error::{Error, Result};
use crate::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmclConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for LmclConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.35,
        }
    }
}

impl LmclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("LMCL scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "LMCL margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LmclOutput {
    pub loss: f64,
    /// ∂L/∂z, treating the embedding as a free vector.
    pub grad_embedding: Vec<f64>,
    /// ∂L/∂W, row-major `C × d`, treating prototypes as free vectors.
    pub grad_prototypes: Vec<f64>,
}

/// Loss over raw cosines `w_jᵀz`; both inputs are expected to be unit norm.
pub fn lmcl_loss(
    embedding: &[f64],
    prototypes: &PrototypeSet,
    label: usize,
    cfg: &LmclConfig,
) -> Result<LmclOutput> {
    let d = prototypes.dim();
    lmcl_loss_raw(embedding, &prototypes.to_matrix(), d, label, cfg)
}

/// As [`lmcl_loss`] over a raw row-major `C × d` prototype matrix.
pub fn lmcl_loss_raw(
    embedding: &[f64],
    prototypes: &[f64],
    dim: usize,
    label: usize,
    cfg: &LmclConfig,
) -> Result<LmclOutput> {
    if embedding.len() != dim || !prototypes.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "embedding of length {} against prototypes of dim {dim}",
            embedding.len()
        )));
    }
    let classes = prototypes.len() / dim;
    if label >= classes {
        return Err(Error::Lookup(format!("label {label} out of range for {classes} classes")));
    }
    let logits: Vec<f64> = prototypes
        .chunks_exact(dim)
        .enumerate()
        .map(|(j, w)| {
            let margin = if j == label { cfg.margin } else { 0.0 };
            cfg.scale * (dot(w, embedding) - margin)
        })
        .collect();
    let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = peak + total.ln() - logits[label];

    let mut grad_embedding = vec![0.0; dim];
    let mut grad_prototypes = vec![0.0; prototypes.len()];
    for (j, w) in prototypes.chunks_exact(dim).enumerate() {
        let indicator = if j == label { 1.0 } else { 0.0 };
        let dcos = cfg.scale * (exps[j] / total - indicator);
        for (g, wk) in grad_embedding.iter_mut().zip(w) {
            *g += dcos * wk;
        }
        for (g, zk) in grad_prototypes[j * dim..(j + 1) * dim].iter_mut().zip(embedding) {
            *g = dcos * zk;
        }
    }
    Ok(LmclOutput {
        loss: loss.max(0.0),
        grad_embedding,
        grad_prototypes,
    })
}
