//! Isotropic Gaussian negative log-likelihood between a descriptor and its
//! anchor, the ablation counterpart of the vMF loss.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GnllOutput {
    pub loss: f64,
    pub grad_sigma_sq: f64,
    pub grad_z: Vec<f64>,
    pub grad_mu: Vec<f64>,
}

/// `‖z − μ‖² / (2σ²) + (d/2)·ln σ²`.
pub fn gnll_loss(z: &[f64], mu: &[f64], sigma_sq: f64) -> Result<GnllOutput> {
    if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
        return Err(Error::Domain(format!("σ² must be finite and > 0, got {sigma_sq}")));
    }
    if z.len() != mu.len() {
        return Err(Error::Shape(format!("z has dim {}, μ has dim {}", z.len(), mu.len())));
    }
    let d = z.len() as f64;
    let diff: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
    let sq: f64 = diff.iter().map(|v| v * v).sum();
    let loss = sq / (2.0 * sigma_sq) + 0.5 * d * sigma_sq.ln();
    let grad_sigma_sq = (d * sigma_sq - sq) / (2.0 * sigma_sq * sigma_sq);
    let grad_z: Vec<f64> = diff.iter().map(|v| v / sigma_sq).collect();
    let grad_mu = grad_z.iter().map(|v| -v).collect();
    Ok(GnllOutput {
        loss,
        grad_sigma_sq,
        grad_z,
        grad_mu,
    })
}
