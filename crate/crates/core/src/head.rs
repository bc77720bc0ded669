//! The concentration head: a small regressor from a pre-aggregation feature
//! map to a strictly positive scalar κ.
//!
//! Two variants are provided:
//!
//! * `Aggregation`: per-position L2 normalization across channels → GeM
//!   pooling → flatten → linear projection → linear-to-scalar → softplus.
//! * `LinearOnly`: flatten → linear-to-scalar → softplus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, matvec, matvec_t};

const NORM_EPS: f64 = 1e-12;

/// A `channels × height × width` tensor stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height * width == 0 {
            return Err(Error::Shape(format!(
                "feature map needs ≥ 1 channel and ≥ 1 position, got {channels}×{height}×{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}×{height}×{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature map has non-finite entries".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn shape(&self) -> FeatureShape {
        FeatureShape {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Values of channel `c` over all spatial positions.
    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.positions();
        &self.values[c * s..(c + 1) * s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Overflow-safe `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Generalized-mean pooling per channel: `(mean_s max(x,0)^p)^{1/p}`.
pub fn gem_pool(fm: &FeatureMap, p: f64) -> Result<Vec<f64>> {
    if !p.is_finite() || p <= 0.0 {
        return Err(Error::Domain(format!("GeM exponent must be finite and > 0, got {p}")));
    }
    Ok((0..fm.channels())
        .map(|c| gem_channel(fm.channel(c), p).0)
        .collect())
}

/// Returns `(g, m)` with `m = mean max(x,0)^p` and `g = m^{1/p}`.
fn gem_channel(xs: &[f64], p: f64) -> (f64, f64) {
    let m = xs.iter().map(|x| pow(x.max(0.0), p)).sum::<f64>() / xs.len() as f64;
    if m == 0.0 {
        (0.0, 0.0)
    } else {
        (m.powf(1.0 / p), m)
    }
}

#[inline]
fn pow(x: f64, p: f64) -> f64 {
    if p == 3.0 {
        x * x * x
    } else {
        x.powf(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    #[default]
    Aggregation,
    LinearOnly,
}

/// Learnable parameters of the concentration head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub variant: HeadVariant,
    pub shape: FeatureShape,
    pub hidden: usize,
    pub gem_p: f64,
    /// Whether the optimizer may move `gem_p`.
    pub train_gem_p: bool,
    /// `hidden × channels`, row-major. Empty for `LinearOnly`.
    pub proj_weights: Vec<f64>,
    /// Length `hidden` for `Aggregation`, `c·h·w` for `LinearOnly`.
    pub kappa_weights: Vec<f64>,
    pub kappa_bias: f64,
}

pub const DEFAULT_GEM_P: f64 = 3.0;
pub const DEFAULT_HIDDEN: usize = 64;

impl HeadParams {
    /// Uniform `±1/sqrt(fan_in)` initialization with the bias set so that the
    /// untrained head predicts roughly `kappa_init`.
    pub fn init(
        variant: HeadVariant,
        shape: FeatureShape,
        hidden: usize,
        kappa_init: f64,
        seed: u64,
    ) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("empty feature shape".into()));
        }
        if !(kappa_init.is_finite() && kappa_init > 0.0) {
            return Err(Error::Domain(format!("initial κ must be > 0, got {kappa_init}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        };
        let (proj_weights, kappa_weights, hidden) = match variant {
            HeadVariant::Aggregation => {
                if hidden == 0 {
                    return Err(Error::Shape("hidden width must be ≥ 1".into()));
                }
                let p = uniform(hidden * shape.channels, shape.channels);
                let k = uniform(hidden, hidden);
                (p, k, hidden)
            }
            HeadVariant::LinearOnly => (Vec::new(), uniform(shape.len(), shape.len()), 0),
        };
        let params = Self {
            variant,
            shape,
            hidden,
            gem_p: DEFAULT_GEM_P,
            train_gem_p: false,
            proj_weights,
            kappa_weights,
            kappa_bias: softplus_inverse(kappa_init),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gem_p < 1.0 || !self.gem_p.is_finite() {
            return Err(Error::Domain(format!("GeM exponent must be ≥ 1, got {}", self.gem_p)));
        }
        let (pl, kl) = match self.variant {
            HeadVariant::Aggregation => (self.hidden * self.shape.channels, self.hidden),
            HeadVariant::LinearOnly => (0, self.shape.len()),
        };
        if self.proj_weights.len() != pl || self.kappa_weights.len() != kl {
            return Err(Error::Shape("head parameter lengths do not match the variant".into()));
        }
        if self
            .proj_weights
            .iter()
            .chain(&self.kappa_weights)
            .chain(std::iter::once(&self.kappa_bias))
            .any(|v| !v.is_finite())
        {
            return Err(Error::Domain("head parameters must be finite".into()));
        }
        Ok(())
    }

    /// Number of scalars in the flat parameter layout.
    pub fn num_params(&self) -> usize {
        self.proj_weights.len() + self.kappa_weights.len() + 2
    }

    /// Flat layout: `[proj_weights, kappa_weights, kappa_bias, gem_p]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.proj_weights);
        v.extend_from_slice(&self.kappa_weights);
        v.push(self.kappa_bias);
        v.push(self.gem_p);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} head parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let (p, rest) = flat.split_at(self.proj_weights.len());
        let (k, rest) = rest.split_at(self.kappa_weights.len());
        self.proj_weights.copy_from_slice(p);
        self.kappa_weights.copy_from_slice(k);
        self.kappa_bias = rest[0];
        self.gem_p = rest[1].max(1.0);
        Ok(())
    }

    fn check_input(&self, fm: &FeatureMap) -> Result<()> {
        if fm.shape() != self.shape {
            return Err(Error::Domain(format!(
                "feature map shape {:?} does not match head shape {:?}",
                fm.shape(),
                self.shape
            )));
        }
        Ok(())
    }
}

/// Gradients in the same layout as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub proj_weights: Vec<f64>,
    pub kappa_weights: Vec<f64>,
    pub kappa_bias: f64,
    pub gem_p: f64,
    /// Gradient with respect to the input feature map.
    pub input: Vec<f64>,
}

impl HeadGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.proj_weights.len() + self.kappa_weights.len() + 2);
        v.extend_from_slice(&self.proj_weights);
        v.extend_from_slice(&self.kappa_weights);
        v.push(self.kappa_bias);
        v.push(self.gem_p);
        v
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    normalized: Vec<f64>,
    norms: Vec<f64>,
    pooled: Vec<f64>,
    means: Vec<f64>,
    hidden: Vec<f64>,
    pub pre_activation: f64,
    pub kappa: f64,
}

/// κ for one feature map.
pub fn head_forward(fm: &FeatureMap, params: &HeadParams) -> Result<f64> {
    Ok(head_trace(fm, params)?.kappa)
}

pub fn head_trace(fm: &FeatureMap, params: &HeadParams) -> Result<HeadTrace> {
    params.check_input(fm)?;
    match params.variant {
        HeadVariant::LinearOnly => {
            let pre = dot(&params.kappa_weights, fm.values()) + params.kappa_bias;
            Ok(HeadTrace {
                normalized: Vec::new(),
                norms: Vec::new(),
                pooled: Vec::new(),
                means: Vec::new(),
                hidden: Vec::new(),
                pre_activation: pre,
                kappa: positive_softplus(pre),
            })
        }
        HeadVariant::Aggregation => {
            let c = fm.channels();
            let s = fm.positions();
            let x = fm.values();
            let mut norms = vec![0.0; s];
            for ch in 0..c {
                for (n, v) in norms.iter_mut().zip(&x[ch * s..(ch + 1) * s]) {
                    *n += v * v;
                }
            }
            norms.iter_mut().for_each(|n| *n = n.sqrt());
            let mut normalized = vec![0.0; c * s];
            for ch in 0..c {
                for pos in 0..s {
                    normalized[ch * s + pos] = x[ch * s + pos] / norms[pos].max(NORM_EPS);
                }
            }
            let (pooled, means): (Vec<f64>, Vec<f64>) = (0..c)
                .map(|ch| gem_channel(&normalized[ch * s..(ch + 1) * s], params.gem_p))
                .unzip();
            let hidden = matvec(&params.proj_weights, params.hidden, &pooled);
            let pre = dot(&params.kappa_weights, &hidden) + params.kappa_bias;
            Ok(HeadTrace {
                normalized,
                norms,
                pooled,
                means,
                hidden,
                pre_activation: pre,
                kappa: positive_softplus(pre),
            })
        }
    }
}

fn positive_softplus(x: f64) -> f64 {
    softplus(x).max(f64::MIN_POSITIVE)
}

/// Parameter (and input) gradients given `upstream = ∂L/∂κ`.
pub fn head_backward(fm: &FeatureMap, params: &HeadParams, upstream: f64) -> Result<HeadGrads> {
    let trace = head_trace(fm, params)?;
    Ok(head_backward_from(fm, params, &trace, upstream))
}

pub fn head_backward_from(
    fm: &FeatureMap,
    params: &HeadParams,
    trace: &HeadTrace,
    upstream: f64,
) -> HeadGrads {
    let dpre = upstream * sigmoid(trace.pre_activation);
    match params.variant {
        HeadVariant::LinearOnly => HeadGrads {
            proj_weights: Vec::new(),
            kappa_weights: fm.values().iter().map(|x| dpre * x).collect(),
            kappa_bias: dpre,
            gem_p: 0.0,
            input: params.kappa_weights.iter().map(|w| dpre * w).collect(),
        },
        HeadVariant::Aggregation => {
            let c = fm.channels();
            let s = fm.positions();
            let sf = s as f64;
            let p = params.gem_p;
            let kappa_weights: Vec<f64> = trace.hidden.iter().map(|h| dpre * h).collect();
            let dh: Vec<f64> = params.kappa_weights.iter().map(|w| dpre * w).collect();
            let mut proj_weights = vec![0.0; params.hidden * c];
            for (row, dhi) in proj_weights.chunks_exact_mut(c).zip(&dh) {
                row.iter_mut()
                    .zip(&trace.pooled)
                    .for_each(|(g, pooled)| *g = dhi * pooled);
            }
            let dg = matvec_t(&params.proj_weights, c, &dh);

            let mut dp = 0.0;
            let mut dy = vec![0.0; c * s];
            for ch in 0..c {
                let m = trace.means[ch];
                if m == 0.0 {
                    continue;
                }
                let g = trace.pooled[ch];
                let ys = &trace.normalized[ch * s..(ch + 1) * s];
                // ∂g/∂y = m^{1/p − 1} y^{p−1} / S
                let scale = dg[ch] * g / m / sf;
                let mut dm_dp = 0.0;
                for (pos, &y) in ys.iter().enumerate() {
                    if y > 0.0 {
                        let yp = pow(y, p);
                        dy[ch * s + pos] = scale * yp / y;
                        dm_dp += yp * y.ln();
                    }
                }
                dm_dp /= sf;
                dp += dg[ch] * g * (-(m.ln()) / (p * p) + dm_dp / (p * m));
            }

            // y = x / ‖x‖ per position
            let mut input = vec![0.0; c * s];
            for pos in 0..s {
                let n = trace.norms[pos];
                if n <= NORM_EPS {
                    for ch in 0..c {
                        input[ch * s + pos] = dy[ch * s + pos] / NORM_EPS;
                    }
                    continue;
                }
                let ydy: f64 = (0..c)
                    .map(|ch| trace.normalized[ch * s + pos] * dy[ch * s + pos])
                    .sum();
                for ch in 0..c {
                    input[ch * s + pos] =
                        (dy[ch * s + pos] - trace.normalized[ch * s + pos] * ydy) / n;
                }
            }

            HeadGrads {
                proj_weights,
                kappa_weights,
                kappa_bias: dpre,
                gem_p: if params.train_gem_p { dp } else { 0.0 },
                input,
            }
        }
    }
}
