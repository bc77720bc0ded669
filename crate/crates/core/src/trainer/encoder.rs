//! Linear stand-in for the backbone: `z = normalize(W r)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matvec, norm};
use crate::vmf::UnitDescriptor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEncoder {
    pub input_dim: usize,
    pub output_dim: usize,
    /// `output_dim × input_dim`, row-major.
    pub weights: Vec<f64>,
}

impl LinearEncoder {
    pub fn new(input_dim: usize, output_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if output_dim < 2 || input_dim == 0 || weights.len() != input_dim * output_dim {
            return Err(Error::Shape(format!(
                "encoder {output_dim}×{input_dim} with {} weights",
                weights.len()
            )));
        }
        Ok(Self {
            input_dim,
            output_dim,
            weights,
        })
    }

    /// Gaussian entries with variance `1/input_dim`.
    pub fn random(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (input_dim as f64).sqrt();
        let weights = (0..input_dim * output_dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * s)
            .collect();
        Self::new(input_dim, output_dim, weights)
    }

    pub fn encode(&self, raw: &[f64]) -> Result<UnitDescriptor> {
        Ok(self.forward(raw)?.0)
    }

    /// Returns the unit output and the norm of the pre-normalization vector.
    pub fn forward(&self, raw: &[f64]) -> Result<(UnitDescriptor, f64)> {
        if raw.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim,
                raw.len()
            )));
        }
        let u = matvec(&self.weights, self.output_dim, raw);
        let n = norm(&u);
        Ok((UnitDescriptor::normalize(u)?, n))
    }

    /// Accumulates `∂L/∂W` into `grad` given `∂L/∂z` at the unit output `z`.
    pub fn backward_into(&self, raw: &[f64], z: &[f64], pre_norm: f64, grad_z: &[f64], grad: &mut [f64]) {
        let zg = dot(z, grad_z);
        for (i, row) in grad.chunks_exact_mut(self.input_dim).enumerate() {
            let du = (grad_z[i] - z[i] * zg) / pre_norm;
            for (g, r) in row.iter_mut().zip(raw) {
                *g += du * r;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::fdcheck::finite_diff_check;

    #[test]
    fn outputs_are_unit() {
        let enc = LinearEncoder::random(7, 5, 1).unwrap();
        let z = enc.encode(&[0.3, -1.0, 2.0, 0.1, 0.0, 4.0, -0.5]).unwrap();
        assert!((norm(z.as_slice()) - 1.0).abs() < 1e-12);
        assert!(enc.encode(&[1.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, d) = (4, 3);
        let raw = [0.5, -1.2, 0.8, 2.0];
        let target = [0.2, -0.7, 0.4];
        for seed in 0..50 {
            let enc = LinearEncoder::random(m, d, seed).unwrap();
            let report = finite_diff_check(
                |w| {
                    let e = LinearEncoder::new(m, d, w.to_vec()).unwrap();
                    let (z, n) = e.forward(&raw).unwrap();
                    let loss = dot(z.as_slice(), &target);
                    let mut g = vec![0.0; w.len()];
                    e.backward_into(&raw, z.as_slice(), n, &target, &mut g);
                    (loss, g)
                },
                &enc.weights,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{:?}", report.worst);
        }
    }
}
