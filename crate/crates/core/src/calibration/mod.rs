//! ECE@K: clamp the scores, bin them, and compare per-bin Recall@K with the
//! rank-anchored expected level `C(Bᵢ) = (M − i)/(M − 1)`.

mod oracle;
mod svg;

pub use oracle::{ece_bruteforce_oracle, OracleInput};
pub use svg::reliability_svg;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scores::{Method, ScoredPair, ScoredQuery};

/// Lower and upper clamp percentiles.
pub const CLAMP_LOW_PERCENTILE: u64 = 1;
pub const CLAMP_HIGH_PERCENTILE: u64 = 99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningStrategy {
    #[default]
    EqualWidth,
    Quantile,
}

impl BinningStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "equal-width" | "equal_width" => Ok(Self::EqualWidth),
            "quantile" => Ok(Self::Quantile),
            _ => Err(Error::Config(format!("unknown binning `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// Saturate both tails at the 1st and 99th percentiles.
    TwoSided,
    /// Saturate only the high tail at the 99th percentile.
    OneSidedHigh,
    None,
}

impl ClampMode {
    /// Protocol default: scores built from κ have two heavy tails, distance
    /// and pose based baselines are bounded below.
    pub fn for_method(method: Method) -> Self {
        match method {
            Method::KappaPlace | Method::InverseKappa | Method::Gnll => ClampMode::TwoSided,
            Method::L2 | Method::Pa | Method::Sue | Method::SueLog => ClampMode::OneSidedHigh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningConfig {
    pub num_bins: usize,
    pub strategy: BinningStrategy,
    /// `None` picks the per-method protocol default.
    pub clamp: Option<ClampMode>,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            num_bins: 10,
            strategy: BinningStrategy::EqualWidth,
            clamp: None,
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {}", self.num_bins)));
        }
        Ok(())
    }

    pub fn clamp_for(&self, method: Method) -> ClampMode {
        self.clamp.unwrap_or_else(|| ClampMode::for_method(method))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clamped {
    pub values: Vec<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Nearest-rank percentile: the `⌈p·n/100⌉`-th smallest value.
fn nearest_rank(sorted: &[f64], p: u64) -> f64 {
    let n = sorted.len() as u64;
    let rank = (p * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

/// Saturates the tails at nearest-rank percentiles. Because the bounds are
/// themselves sample values, clamping twice changes nothing.
pub fn clamp_values(values: &[f64], mode: ClampMode) -> Result<Clamped> {
    if values.is_empty() {
        return Err(Error::Domain("cannot clamp an empty score vector".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lower, upper) = match mode {
        ClampMode::TwoSided => (
            Some(nearest_rank(&sorted, CLAMP_LOW_PERCENTILE)),
            Some(nearest_rank(&sorted, CLAMP_HIGH_PERCENTILE)),
        ),
        ClampMode::OneSidedHigh => (None, Some(nearest_rank(&sorted, CLAMP_HIGH_PERCENTILE))),
        ClampMode::None => (None, None),
    };
    let values = values
        .iter()
        .map(|&v| {
            let v = lower.map_or(v, |lo| v.max(lo));
            upper.map_or(v, |hi| v.min(hi))
        })
        .collect();
    Ok(Clamped {
        values,
        lower,
        upper,
    })
}

/// Bin index in `1..=M` per value, 1 being the most certain.
pub fn bin_assign(values: &[f64], cfg: &BinningConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let m = cfg.num_bins;
    match cfg.strategy {
        BinningStrategy::EqualWidth => {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi <= lo {
                return Ok(vec![1; values.len()]);
            }
            let mf = m as f64;
            Ok(values
                .iter()
                .map(|&v| {
                    let t = (v - lo) / (hi - lo) * mf;
                    (t.floor() as usize + 1).min(m)
                })
                .collect())
        }
        BinningStrategy::Quantile => {
            let n = values.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            let mut bins = vec![0; n];
            let mut min_rank = 0;
            for (pos, &i) in order.iter().enumerate() {
                if pos > 0 && values[i] != values[order[pos - 1]] {
                    min_rank = pos;
                }
                bins[i] = min_rank * m / n + 1;
            }
            Ok(bins)
        }
    }
}

/// `C(Bᵢ) = (M − i)/(M − 1)`.
pub fn expected_level(i: usize, m: usize) -> Result<f64> {
    if m < 2 || i == 0 || i > m {
        return Err(Error::Domain(format!("bin {i} outside 1..={m} (M ≥ 2)")));
    }
    Ok((m - i) as f64 / (m - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Query,
    Match,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub index: usize,
    pub count: usize,
    /// Recall@K (query level) or positive fraction (match level); `None` when empty.
    pub observed: Option<f64>,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: Method,
    pub level: Level,
    pub k: usize,
    pub num_bins: usize,
    pub strategy: BinningStrategy,
    pub clamp: ClampMode,
    pub clamp_lower: Option<f64>,
    pub clamp_upper: Option<f64>,
    pub total: usize,
    pub degenerate: usize,
    pub bins: Vec<BinStat>,
    pub ece: f64,
}

impl CalibrationReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Domain(e.to_string()))
    }

    /// One row per bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,level,k,bin,count,observed,expected\n");
        let level = match self.level {
            Level::Query => "query",
            Level::Match => "match",
        };
        for b in &self.bins {
            let obs = b.observed.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{level},{},{},{},{obs},{}\n",
                self.method, self.k, b.index, b.count, b.expected
            ));
        }
        s
    }
}

/// Per-bin aggregation shared by both levels.
fn aggregate(
    bins: &[usize],
    successes: &[bool],
    m: usize,
) -> Result<(Vec<BinStat>, f64)> {
    let n = bins.len();
    let mut counts = vec![0usize; m];
    let mut hits = vec![0usize; m];
    for (&b, &s) in bins.iter().zip(successes) {
        counts[b - 1] += 1;
        if s {
            hits[b - 1] += 1;
        }
    }
    let mut stats = Vec::with_capacity(m);
    let mut ece = 0.0;
    for i in 1..=m {
        let c = expected_level(i, m)?;
        let count = counts[i - 1];
        let observed = if count == 0 {
            None
        } else {
            let r = hits[i - 1] as f64 / count as f64;
            ece += count as f64 / n as f64 * (r - c).abs();
            Some(r)
        };
        stats.push(BinStat {
            index: i,
            count,
            observed,
            expected: c,
        });
    }
    Ok((stats, ece))
}

fn calibrate(
    method: Method,
    level: Level,
    k: usize,
    scores: &[f64],
    successes: &[bool],
    degenerate: usize,
    cfg: &BinningConfig,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    if scores.len() != successes.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} success flags",
            scores.len(),
            successes.len()
        )));
    }
    let mode = cfg.clamp_for(method);
    let clamped = clamp_values(scores, mode)?;
    let bins = bin_assign(&clamped.values, cfg)?;
    let (stats, ece) = aggregate(&bins, successes, cfg.num_bins)?;
    Ok(CalibrationReport {
        method,
        level,
        k,
        num_bins: cfg.num_bins,
        strategy: cfg.strategy,
        clamp: mode,
        clamp_lower: clamped.lower,
        clamp_upper: clamped.upper,
        total: scores.len(),
        degenerate,
        bins: stats,
        ece,
    })
}

/// Query-level ECE@K: `Σᵢ (|Bᵢ|/N)·|R@K(Bᵢ) − C(Bᵢ)|`.
pub fn ece_at_k(
    scored: &[ScoredQuery],
    success_at_k: &[bool],
    k: usize,
    cfg: &BinningConfig,
) -> Result<CalibrationReport> {
    let method = single_method(scored.iter().map(|s| s.method))?;
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let degenerate = scored.iter().filter(|s| s.degenerate).count();
    calibrate(method, Level::Query, k, &scores, success_at_k, degenerate, cfg)
}

/// Match-level ECE@K over exactly `T = K·N` query/reference pairs.
pub fn match_ece_at_k(
    pairs: &[ScoredPair],
    k: usize,
    num_queries: usize,
    cfg: &BinningConfig,
) -> Result<CalibrationReport> {
    if pairs.len() != k * num_queries {
        return Err(Error::Shape(format!(
            "match-level ECE needs K·N = {} pairs, got {}",
            k * num_queries,
            pairs.len()
        )));
    }
    let method = single_method(pairs.iter().map(|p| p.method))?;
    let scores: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    let flags: Vec<bool> = pairs.iter().map(|p| p.is_positive).collect();
    let degenerate = pairs.iter().filter(|p| p.degenerate).count();
    calibrate(method, Level::Match, k, &scores, &flags, degenerate, cfg)
}

fn single_method(mut it: impl Iterator<Item = Method>) -> Result<Method> {
    let first = it
        .next()
        .ok_or_else(|| Error::Domain("no scores to calibrate".into()))?;
    if it.any(|m| m != first) {
        return Err(Error::Domain("scores from different methods mixed".into()));
    }
    Ok(first)
}
