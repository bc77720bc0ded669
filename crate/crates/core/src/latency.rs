//! Inference latency of the descriptor path versus the descriptor + κ path.
//!
//! The descriptor path is a small convolutional stand-in for a backbone:
//! two 3×3 conv + ReLU + 2×2 max-pool stages produce a feature map, which
//! GeM pooling and a linear projection turn into a unit descriptor. The κ
//! path runs the same network and additionally feeds the shared feature map
//! through the concentration head.

use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{gem_pool, head_forward, FeatureMap, FeatureShape, HeadParams, HeadVariant, DEFAULT_GEM_P};
use crate::linalg::matvec;
use crate::vmf::UnitDescriptor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup: usize,
    pub runs: usize,
    /// Input image as `(channels, side)`; the side must be divisible by 4.
    pub input_channels: usize,
    pub input_side: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub descriptor_dim: usize,
    pub head_variant: HeadVariant,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 20,
            runs: 200,
            input_channels: 3,
            input_side: 32,
            conv1_channels: 32,
            conv2_channels: 64,
            descriptor_dim: 64,
            head_variant: HeadVariant::Aggregation,
            hidden: crate::head::DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("bench needs at least one timed run".into()));
        }
        if self.input_side < 4 || !self.input_side.is_multiple_of(4) {
            return Err(Error::Config("input side must be a positive multiple of 4".into()));
        }
        if self.input_channels == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 || self.descriptor_dim < 2 {
            return Err(Error::Config("bench layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Conv3x3 {
    cin: usize,
    cout: usize,
    /// `cout × cin × 3 × 3`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    fn random(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (9 * cin) as f64).sqrt();
        Self {
            cin,
            cout,
            weights: (0..cout * cin * 9).map(|_| rng.random_range(-a..a)).collect(),
            bias: (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect(),
        }
    }

    /// Same-padded convolution, ReLU, then 2×2 max-pool.
    fn forward(&self, x: &[f64], side: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.cout * side * side];
        for o in 0..self.cout {
            let out = &mut y[o * side * side..(o + 1) * side * side];
            out.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.cin {
                let plane = &x[i * side * side..(i + 1) * side * side];
                let k = &self.weights[(o * self.cin + i) * 9..(o * self.cin + i + 1) * 9];
                for r in 0..side {
                    for c in 0..side {
                        let mut acc = 0.0;
                        for dr in 0..3 {
                            let rr = r + dr;
                            if rr == 0 || rr > side {
                                continue;
                            }
                            for dc in 0..3 {
                                let cc = c + dc;
                                if cc == 0 || cc > side {
                                    continue;
                                }
                                acc += k[dr * 3 + dc] * plane[(rr - 1) * side + cc - 1];
                            }
                        }
                        out[r * side + c] += acc;
                    }
                }
            }
        }
        let half = side / 2;
        let mut pooled = vec![0.0; self.cout * half * half];
        for o in 0..self.cout {
            for r in 0..half {
                for c in 0..half {
                    let at = |rr: usize, cc: usize| y[o * side * side + rr * side + cc].max(0.0);
                    pooled[o * half * half + r * half + c] =
                        at(2 * r, 2 * c).max(at(2 * r + 1, 2 * c)).max(at(2 * r, 2 * c + 1)).max(at(2 * r + 1, 2 * c + 1));
                }
            }
        }
        pooled
    }
}

/// Backbone stand-in plus descriptor aggregation.
#[derive(Debug, Clone)]
pub struct StandInNetwork {
    side: usize,
    conv1: Conv3x3,
    conv2: Conv3x3,
    /// `descriptor_dim × conv2_channels`
    projection: Vec<f64>,
    descriptor_dim: usize,
}

impl StandInNetwork {
    pub fn new(cfg: &BenchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let conv1 = Conv3x3::random(cfg.input_channels, cfg.conv1_channels, &mut rng);
        let conv2 = Conv3x3::random(cfg.conv1_channels, cfg.conv2_channels, &mut rng);
        let a = 1.0 / (cfg.conv2_channels as f64).sqrt();
        let projection = (0..cfg.descriptor_dim * cfg.conv2_channels)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Ok(Self {
            side: cfg.input_side,
            conv1,
            conv2,
            projection,
            descriptor_dim: cfg.descriptor_dim,
        })
    }

    pub fn feature_shape(&self) -> FeatureShape {
        FeatureShape {
            channels: self.conv2.cout,
            height: self.side / 4,
            width: self.side / 4,
        }
    }

    pub fn features(&self, image: &[f64]) -> Result<FeatureMap> {
        let h1 = self.conv1.forward(image, self.side);
        let h2 = self.conv2.forward(&h1, self.side / 2);
        let q = self.side / 4;
        FeatureMap::new(self.conv2.cout, q, q, h2)
    }

    pub fn descriptor(&self, fm: &FeatureMap) -> Result<UnitDescriptor> {
        let pooled = gem_pool(fm, DEFAULT_GEM_P)?;
        let raw = matvec(&self.projection, self.descriptor_dim, &pooled);
        UnitDescriptor::normalize(raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathTiming {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config: BenchConfig,
    pub descriptor_path: PathTiming,
    pub kappa_path: PathTiming,
    /// `(κ path − descriptor path) / descriptor path`, from the means.
    pub overhead: f64,
}

fn summarize(ms: &[f64]) -> PathTiming {
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let var = ms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    PathTiming {
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: ms.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

fn timed(f: &mut impl FnMut() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// Times both paths on one fixed random image. Runs alternate between the
/// two paths so that drift in machine load hits both equally.
pub fn measure_latency(cfg: &BenchConfig) -> Result<LatencyReport> {
    let net = StandInNetwork::new(cfg)?;
    let head = HeadParams::init(cfg.head_variant, net.feature_shape(), cfg.hidden, 50.0, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xbe7c);
    let image: Vec<f64> = (0..cfg.input_channels * cfg.input_side * cfg.input_side)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let mut descriptor = || -> Result<()> {
        let fm = net.features(black_box(&image))?;
        black_box(net.descriptor(&fm)?);
        Ok(())
    };
    let mut with_kappa = || -> Result<()> {
        let fm = net.features(black_box(&image))?;
        black_box(net.descriptor(&fm)?);
        black_box(head_forward(&fm, &head)?);
        Ok(())
    };
    for _ in 0..cfg.warmup {
        descriptor()?;
        with_kappa()?;
    }
    let (mut a, mut b) = (Vec::with_capacity(cfg.runs), Vec::with_capacity(cfg.runs));
    for i in 0..cfg.runs {
        // alternate which path goes first as well
        if i % 2 == 0 {
            a.push(timed(&mut descriptor)?);
            b.push(timed(&mut with_kappa)?);
        } else {
            b.push(timed(&mut with_kappa)?);
            a.push(timed(&mut descriptor)?);
        }
    }
    let (descriptor_path, kappa_path) = (summarize(&a), summarize(&b));
    Ok(LatencyReport {
        config: cfg.clone(),
        overhead: (kappa_path.mean_ms - descriptor_path.mean_ms) / descriptor_path.mean_ms,
        descriptor_path,
        kappa_path,
    })
}
