//! The von Mises-Fisher distribution on S^{d-1}.
//!
//! The log-partition term of the negative log-likelihood is replaced by the
//! integral of the Amos upper bound on the Bessel ratio `I_{v+1}(κ)/I_v(κ)`,
//! which stays finite for any dimension and concentration:
//!
//! ```text
//! A(κ)  = sqrt(κ² + ṽ²) − ṽ·ln(ṽ + sqrt(κ² + ṽ²)),   ṽ = (d − 1)/2
//! A'(κ) = κ / (ṽ + sqrt(κ² + ṽ²))
//! L(z; μ, κ) = A(κ) − κ·μᵀz          (up to an additive constant)
//! ```
//!
//! Exact densities (`log_density`) go through the series/continued-fraction
//! oracles in [`crate::bessel`] and are restricted to small dimensions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bessel;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

/// Norm tolerance for computed unit vectors.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Resultant magnitudes below this are treated as complete cancellation.
pub const RESULTANT_EPS: f64 = 1e-12;

/// Default uncertainty reported for a cancelled resultant.
pub const DEFAULT_UNCERTAINTY_CAP: f64 = 1e12;

/// A point on the unit hypersphere S^{d-1}, d ≥ 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitDescriptor(Vec<f64>);

impl UnitDescriptor {
    /// Wraps `values`, which must already have unit norm within [`UNIT_TOLERANCE`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!(
                "descriptor dimension must be at least 2, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("descriptor has non-finite entries".into()));
        }
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Domain(format!("descriptor norm {n} is not 1")));
        }
        Ok(Self(values))
    }

    /// Projects an arbitrary non-zero vector onto the sphere.
    pub fn normalize(mut values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!(
                "descriptor dimension must be at least 2, got {}",
                values.len()
            )));
        }
        let n = norm(&values);
        if !n.is_finite() || n < RESULTANT_EPS {
            return Err(Error::Degenerate(format!(
                "cannot normalize a vector of norm {n}"
            )));
        }
        values.iter_mut().for_each(|v| *v /= n);
        Ok(Self(values))
    }

    /// The `i`-th standard basis vector of R^d.
    pub fn basis(dim: usize, i: usize) -> Result<Self> {
        if i >= dim {
            return Err(Error::Domain(format!("basis index {i} >= dimension {dim}")));
        }
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        Self::new(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Cosine similarity with `other`, clamped to [−1, 1].
    pub fn cos(&self, other: &UnitDescriptor) -> f64 {
        dot(&self.0, &other.0).clamp(-1.0, 1.0)
    }
}

impl TryFrom<Vec<f64>> for UnitDescriptor {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<UnitDescriptor> for Vec<f64> {
    fn from(u: UnitDescriptor) -> Self {
        u.0
    }
}

impl AsRef<[f64]> for UnitDescriptor {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Mean direction and concentration of a vMF distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub mu: UnitDescriptor,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitDescriptor, kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        Ok(Self { mu, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

/// Order of the Bessel function attached to dimension `d`: `v = d/2 − 1` and
/// the shifted order `ṽ = v + 1/2` that appears in the Amos bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BesselOrder {
    dim: usize,
}

impl BesselOrder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Domain(format!("dimension must be ≥ 2, got {dim}")));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `v = d/2 − 1`.
    pub fn v(&self) -> f64 {
        self.dim as f64 / 2.0 - 1.0
    }

    /// `ṽ = (d − 1)/2`.
    pub fn v_tilde(&self) -> f64 {
        (self.dim as f64 - 1.0) / 2.0
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !kappa.is_finite() || kappa < 0.0 {
        Err(Error::Domain(format!(
            "concentration must be finite and ≥ 0, got {kappa}"
        )))
    } else {
        Ok(())
    }
}

fn check_dims(z: &UnitDescriptor, mu: &UnitDescriptor, order: Option<BesselOrder>) -> Result<()> {
    if z.dim() != mu.dim() {
        return Err(Error::Domain(format!(
            "descriptor dimension {} != mean dimension {}",
            z.dim(),
            mu.dim()
        )));
    }
    if let Some(order) = order {
        if order.dim() != z.dim() {
            return Err(Error::Domain(format!(
                "Bessel order built for d={} used with d={}",
                order.dim(),
                z.dim()
            )));
        }
    }
    Ok(())
}

/// Surrogate log-partition `A(κ)`, the integral of the Amos upper bound.
pub fn stable_log_partition(kappa: f64, order: BesselOrder) -> Result<f64> {
    check_kappa(kappa)?;
    let vt = order.v_tilde();
    let root = kappa.hypot(vt);
    Ok(root - vt * (vt + root).ln())
}

/// `A'(κ) = κ / (ṽ + sqrt(κ² + ṽ²))`, the Amos upper bound on `I_{v+1}(κ)/I_v(κ)`.
pub fn stable_log_partition_grad(kappa: f64, order: BesselOrder) -> Result<f64> {
    check_kappa(kappa)?;
    let vt = order.v_tilde();
    Ok(kappa / (vt + kappa.hypot(vt)))
}

/// Inverse of [`stable_log_partition_grad`]: the κ at which the surrogate
/// ratio equals `r ∈ [0, 1)`. Closed form `κ = 2ṽr / (1 − r²)`.
pub fn invert_log_partition_grad(r: f64, order: BesselOrder) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Domain(format!("ratio must lie in [0, 1), got {r}")));
    }
    Ok(2.0 * order.v_tilde() * r / (1.0 - r * r))
}

/// Stable vMF negative log-likelihood `A(κ) − κ·μᵀz` (constant dropped).
pub fn vmf_nll(
    z: &UnitDescriptor,
    mu: &UnitDescriptor,
    kappa: f64,
    order: BesselOrder,
) -> Result<f64> {
    check_dims(z, mu, Some(order))?;
    Ok(stable_log_partition(kappa, order)? - kappa * dot(z.as_slice(), mu.as_slice()))
}

/// `∂L/∂κ = A'(κ) − μᵀz`.
pub fn vmf_nll_grad_kappa(
    z: &UnitDescriptor,
    mu: &UnitDescriptor,
    kappa: f64,
    order: BesselOrder,
) -> Result<f64> {
    check_dims(z, mu, Some(order))?;
    Ok(stable_log_partition_grad(kappa, order)? - dot(z.as_slice(), mu.as_slice()))
}

/// Gradient of the NLL with respect to the descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGradient {
    /// Ambient gradient `−κμ`.
    pub raw: Vec<f64>,
    /// `(I − zzᵀ)(−κμ)`, the component tangent to the sphere at `z`.
    pub tangent: Vec<f64>,
}

pub fn vmf_nll_grad_z(
    z: &UnitDescriptor,
    mu: &UnitDescriptor,
    kappa: f64,
) -> Result<DescriptorGradient> {
    check_dims(z, mu, None)?;
    check_kappa(kappa)?;
    let raw: Vec<f64> = mu.as_slice().iter().map(|m| -kappa * m).collect();
    let along = dot(z.as_slice(), &raw);
    let tangent = raw
        .iter()
        .zip(z.as_slice())
        .map(|(g, zi)| g - along * zi)
        .collect();
    Ok(DescriptorGradient { raw, tangent })
}

/// Largest dimension `log_density` accepts.
pub const EXACT_DENSITY_MAX_DIM: usize = 64;
/// Largest concentration `log_density` accepts.
pub const EXACT_DENSITY_MAX_KAPPA: f64 = 1e4;

/// Exact log density `ln C_d(κ) + κ·μᵀz`.
pub fn log_density(z: &UnitDescriptor, params: &VmfParams, order: BesselOrder) -> Result<f64> {
    check_dims(z, &params.mu, Some(order))?;
    let kappa = params.kappa;
    check_kappa(kappa)?;
    if order.dim() > EXACT_DENSITY_MAX_DIM || kappa > EXACT_DENSITY_MAX_KAPPA {
        return Err(Error::Range(format!(
            "exact density validated for d ≤ {EXACT_DENSITY_MAX_DIM}, κ ≤ {EXACT_DENSITY_MAX_KAPPA}; got d={}, κ={kappa}",
            order.dim()
        )));
    }
    Ok(log_normalizer(kappa, order)? + kappa * params.mu.cos(z))
}

/// `ln C_d(κ)`; at κ = 0 this is minus the log surface area of S^{d-1}.
pub fn log_normalizer(kappa: f64, order: BesselOrder) -> Result<f64> {
    let d = order.dim() as f64;
    if kappa == 0.0 {
        let half = d / 2.0;
        return Ok(statrs::function::gamma::ln_gamma(half)
            - std::f64::consts::LN_2
            - half * std::f64::consts::PI.ln());
    }
    let v = order.v();
    Ok(v * kappa.ln()
        - (d / 2.0) * (2.0 * std::f64::consts::PI).ln()
        - bessel::log_bessel_exact(v, kappa)?)
}

/// Draws `count` samples from vMF(μ, κ) using Wood's rejection scheme for the
/// component along μ and a uniform direction in the tangent space.
///
/// Output is a deterministic function of `(params, count, seed)`.
pub fn sample_vmf(params: &VmfParams, count: usize, seed: u64) -> Result<Vec<UnitDescriptor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_vmf_with(params, count, &mut rng)
}

/// As [`sample_vmf`] but drawing from a caller-owned generator.
pub fn sample_vmf_with<R: Rng + ?Sized>(
    params: &VmfParams,
    count: usize,
    rng: &mut R,
) -> Result<Vec<UnitDescriptor>> {
    if count == 0 {
        return Err(Error::Domain("sample count must be ≥ 1".into()));
    }
    check_kappa(params.kappa)?;
    let sampler = WoodSampler::new(params.dim(), params.kappa)?;
    (0..count)
        .map(|_| {
            let w = sampler.sample_cos(rng);
            let tangent = random_tangent(&params.mu, rng);
            // sqrt(1 − w²) via (1 − w)(1 + w) keeps precision when w ≈ 1.
            let s = (w.one_minus * (1.0 + w.value)).max(0.0).sqrt();
            let v = params
                .mu
                .as_slice()
                .iter()
                .zip(&tangent)
                .map(|(m, t)| w.value * m + s * t)
                .collect();
            UnitDescriptor::normalize(v)
        })
        .collect()
}

struct CosSample {
    value: f64,
    one_minus: f64,
}

struct WoodSampler {
    kappa: f64,
    dm1: f64,
    b: f64,
    x0: f64,
    log_1m_x0sq: f64,
    beta: Beta<f64>,
}

impl WoodSampler {
    fn new(dim: usize, kappa: f64) -> Result<Self> {
        let dm1 = dim as f64 - 1.0;
        // b = (−2κ + sqrt(4κ² + (d−1)²)) / (d−1), rewritten without cancellation.
        let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let beta = Beta::new(dm1 / 2.0, dm1 / 2.0)
            .map_err(|e| Error::Domain(format!("beta parameters: {e}")))?;
        Ok(Self {
            kappa,
            dm1,
            b,
            x0,
            log_1m_x0sq: (1.0 - x0 * x0).ln(),
            beta,
        })
    }

    fn sample_cos<R: Rng + ?Sized>(&self, rng: &mut R) -> CosSample {
        loop {
            let z: f64 = self.beta.sample(rng);
            let denom = 1.0 - (1.0 - self.b) * z;
            let w = (1.0 - (1.0 + self.b) * z) / denom;
            let one_minus = 2.0 * self.b * z / denom;
            let u: f64 = rng.random();
            let lhs = self.kappa * (w - self.x0)
                + self.dm1 * ((1.0 - self.x0 * w).ln() - self.log_1m_x0sq);
            if lhs >= u.ln() {
                return CosSample {
                    value: w,
                    one_minus,
                };
            }
        }
    }
}

fn random_tangent<R: Rng + ?Sized>(mu: &UnitDescriptor, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..mu.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let along = dot(&v, mu.as_slice());
        v.iter_mut()
            .zip(mu.as_slice())
            .for_each(|(x, m)| *x -= along * m);
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            return v;
        }
    }
}

/// Mean resultant length `R̄ = ‖(1/n) Σ zᵢ‖`.
pub fn mean_resultant_length(samples: &[UnitDescriptor]) -> Result<f64> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Domain("no samples".into()))?;
    let d = first.dim();
    let mut sum = vec![0.0; d];
    for s in samples {
        if s.dim() != d {
            return Err(Error::Domain("samples have mixed dimensions".into()));
        }
        sum.iter_mut().zip(s.as_slice()).for_each(|(a, b)| *a += b);
    }
    Ok(norm(&sum) / samples.len() as f64)
}

/// Closed-form concentration estimate `κ̂ = R̄(d − R̄²)/(1 − R̄²)` (Banerjee et al.).
pub fn mle_kappa(samples: &[UnitDescriptor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Domain("mle_kappa needs at least 2 samples".into()));
    }
    let r = mean_resultant_length(samples)?;
    kappa_from_resultant(r, samples[0].dim())
}

/// The estimator behind [`mle_kappa`] applied to a known `R̄`.
pub fn kappa_from_resultant(r_bar: f64, dim: usize) -> Result<f64> {
    if !(0.0..=1.0 + 1e-12).contains(&r_bar) {
        return Err(Error::Domain(format!("R̄ must lie in [0, 1], got {r_bar}")));
    }
    if 1.0 - r_bar < 1e-12 {
        return Err(Error::Degenerate(
            "mean resultant length is 1: samples are identical".into(),
        ));
    }
    let d = dim as f64;
    let r2 = r_bar * r_bar;
    Ok((r_bar * (d - r2) / (1.0 - r2)).max(0.0))
}

/// Outcome of fusing two vMF parameters through their resultant vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedUncertainty {
    pub value: f64,
    /// Set when the resultant cancelled and `value` is the configured cap.
    pub degenerate: bool,
}

/// `U = 1 / sqrt(κa² + κb² + 2κaκb·c)`, the inverse length of the sum of the
/// two κ-scaled mean directions. Cancelled resultants map to `cap`.
pub fn resultant_uncertainty(
    kappa_a: f64,
    kappa_b: f64,
    cos_ab: f64,
    cap: f64,
) -> Result<FusedUncertainty> {
    check_kappa(kappa_a)?;
    check_kappa(kappa_b)?;
    if !cos_ab.is_finite() {
        return Err(Error::Domain(format!("cosine must be finite, got {cos_ab}")));
    }
    let c = cos_ab.clamp(-1.0, 1.0);
    // (κa − κb)² + 2κaκb(1 + c) equals the usual expansion but cancels to
    // exactly zero for antipodal equal-κ pairs.
    let diff = kappa_a - kappa_b;
    let sq = diff * diff + 2.0 * kappa_a * kappa_b * (1.0 + c);
    let magnitude = sq.max(0.0).sqrt();
    if magnitude < RESULTANT_EPS {
        Ok(FusedUncertainty {
            value: cap,
            degenerate: true,
        })
    } else {
        Ok(FusedUncertainty {
            value: (1.0 / magnitude).min(cap),
            degenerate: false,
        })
    }
}
