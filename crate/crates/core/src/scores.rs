//! Per-query and per-pair uncertainty scores. Every method is oriented so
//! that a higher score means more uncertain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{DescriptorBank, RetrievalResult};
use crate::vmf::{resultant_uncertainty, FusedUncertainty};

/// κ values below this are raised to it before any score is built.
pub const KAPPA_FLOOR: f64 = 1.0;

pub fn floor_kappa(kappa: f64) -> Result<f64> {
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(Error::Domain(format!("κ must be finite and ≥ 0, got {kappa}")));
    }
    Ok(kappa.max(KAPPA_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Resultant of the query κ and its top-1 match's κ.
    #[serde(rename = "kappaplace")]
    KappaPlace,
    InverseKappa,
    L2,
    Pa,
    Sue,
    SueLog,
    /// Predicted variance of the Gaussian ablation head.
    Gnll,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::KappaPlace,
        Method::InverseKappa,
        Method::L2,
        Method::Pa,
        Method::Sue,
        Method::SueLog,
        Method::Gnll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::KappaPlace => "kappaplace",
            Method::InverseKappa => "inverse_kappa",
            Method::L2 => "l2",
            Method::Pa => "pa",
            Method::Sue => "sue",
            Method::SueLog => "sue_log",
            Method::Gnll => "gnll",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || (norm == "1/kappa" && *m == Method::InverseKappa))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub query_id: u64,
    pub method: Method,
    pub score: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub query_id: u64,
    pub reference_id: u64,
    pub rank: usize,
    pub method: Method,
    pub score: f64,
    pub degenerate: bool,
    pub is_positive: bool,
}

/// Resultant uncertainty of a query and its top-1 match, after flooring both κ.
pub fn query_uncertainty(kappa_q: f64, kappa_r1: f64, cos_qr1: f64, cap: f64) -> Result<FusedUncertainty> {
    resultant_uncertainty(floor_kappa(kappa_q)?, floor_kappa(kappa_r1)?, cos_qr1, cap)
}

/// The same kernel applied to an arbitrary query/reference pair.
pub fn match_uncertainty(kappa_q: f64, kappa_r: f64, cos_qr: f64, cap: f64) -> Result<FusedUncertainty> {
    query_uncertainty(kappa_q, kappa_r, cos_qr, cap)
}

pub fn query_uncertainty_inverse_kappa(kappa_q: f64) -> Result<f64> {
    Ok(1.0 / floor_kappa(kappa_q)?)
}

/// Euclidean distance between unit vectors with cosine `cos`.
pub fn l2_from_cos(cos: f64) -> f64 {
    (2.0 - 2.0 * cos.clamp(-1.0, 1.0)).max(0.0).sqrt()
}

/// Top-1 descriptor distance.
pub fn baseline_l2(result: &RetrievalResult) -> Result<f64> {
    let c = result
        .similarities
        .first()
        .ok_or_else(|| Error::Domain("L2 score needs at least one neighbour".into()))?;
    Ok(l2_from_cos(*c))
}

/// Ratio `d₁/d₂` of the two nearest distances; 1 when both are zero.
pub fn baseline_pa(result: &RetrievalResult) -> Result<f64> {
    if result.similarities.len() < 2 {
        return Err(Error::Domain("PA score needs at least two neighbours".into()));
    }
    let d1 = l2_from_cos(result.similarities[0]);
    let d2 = l2_from_cos(result.similarities[1]);
    if d2 == 0.0 {
        return Ok(1.0);
    }
    Ok((d1 / d2).min(1.0))
}

/// Trace of the softmax(similarity)-weighted covariance of the top-`k`
/// reference poses.
pub fn baseline_sue(result: &RetrievalResult, bank: &DescriptorBank, k: usize) -> Result<f64> {
    let poses = bank
        .poses()
        .ok_or_else(|| Error::Unsupported("SUE needs reference poses".into()))?;
    if k < 2 || result.similarities.len() < k {
        return Err(Error::Domain(format!(
            "SUE needs K ≥ 2 neighbours, have {} for K={k}",
            result.similarities.len()
        )));
    }
    let top: Vec<[f64; 2]> = result.indices[..k].iter().map(|&i| poses[i]).collect();
    sue_from_poses(&result.similarities[..k], &top)
}

pub fn sue_from_poses(similarities: &[f64], poses: &[[f64; 2]]) -> Result<f64> {
    if similarities.len() != poses.len() || poses.is_empty() {
        return Err(Error::Shape("SUE needs one pose per similarity".into()));
    }
    let peak = similarities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = similarities.iter().map(|s| (s - peak).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut mean = [0.0; 2];
    for (wi, p) in w.iter().zip(poses) {
        mean[0] += wi / total * p[0];
        mean[1] += wi / total * p[1];
    }
    let trace: f64 = w
        .iter()
        .zip(poses)
        .map(|(wi, p)| wi / total * ((p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)))
        .sum();
    // identical poses can leave rounding residue in the mean
    if poses.iter().all(|p| *p == poses[0]) {
        return Ok(0.0);
    }
    Ok(trace.max(0.0))
}

pub fn sue_log(v: f64) -> f64 {
    v.ln_1p()
}

/// Inputs shared by the per-query scorers.
pub struct ScoreContext<'a> {
    pub results: &'a [RetrievalResult],
    pub bank: &'a DescriptorBank,
    /// Predicted κ (or σ² for `Gnll`) per query, aligned with `results`.
    pub query_kappas: Option<&'a [f64]>,
    /// Predicted κ per bank row.
    pub bank_kappas: Option<&'a [f64]>,
    pub sue_k: usize,
    pub cap: f64,
}

/// One score per query for `method`, in result order.
pub fn score_queries(method: Method, ctx: &ScoreContext<'_>) -> Result<Vec<ScoredQuery>> {
    let need_q = || {
        ctx.query_kappas
            .filter(|k| k.len() == ctx.results.len())
            .ok_or_else(|| Error::Unsupported(format!("{method} needs one predicted value per query")))
    };
    let mut out = Vec::with_capacity(ctx.results.len());
    for (i, res) in ctx.results.iter().enumerate() {
        let (score, degenerate) = match method {
            Method::KappaPlace => {
                let kq = need_q()?[i];
                let kb = ctx
                    .bank_kappas
                    .ok_or_else(|| Error::Unsupported("kappaplace needs reference κ".into()))?;
                let top = *res
                    .indices
                    .first()
                    .ok_or_else(|| Error::Domain("empty retrieval result".into()))?;
                let u = query_uncertainty(kq, kb[top], res.similarities[0], ctx.cap)?;
                (u.value, u.degenerate)
            }
            Method::InverseKappa => (query_uncertainty_inverse_kappa(need_q()?[i])?, false),
            Method::Gnll => {
                let v = need_q()?[i];
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Domain(format!("σ² must be > 0, got {v}")));
                }
                (v, false)
            }
            Method::L2 => (baseline_l2(res)?, false),
            Method::Pa => (baseline_pa(res)?, false),
            Method::Sue => (baseline_sue(res, ctx.bank, ctx.sue_k)?, false),
            Method::SueLog => (sue_log(baseline_sue(res, ctx.bank, ctx.sue_k)?), false),
        };
        out.push(ScoredQuery {
            query_id: res.query_id,
            method,
            score,
            degenerate,
        });
    }
    Ok(out)
}

/// One pair per (query, rank ≤ k): `KappaPlace` uses the resultant kernel,
/// `L2` the pairwise descriptor distance.
pub fn score_pairs(
    method: Method,
    ctx: &ScoreContext<'_>,
    positives: &[Vec<bool>],
    k: usize,
) -> Result<Vec<ScoredPair>> {
    if positives.len() != ctx.results.len() {
        return Err(Error::Shape("one positive-flag row per result required".into()));
    }
    let mut out = Vec::with_capacity(ctx.results.len() * k);
    for (i, res) in ctx.results.iter().enumerate() {
        if res.k() < k || positives[i].len() < k {
            return Err(Error::Domain(format!("match scores need {k} ranks per query")));
        }
        for rank in 0..k {
            let cos = res.similarities[rank];
            let (score, degenerate) = match method {
                Method::KappaPlace => {
                    let (Some(kq), Some(kb)) = (ctx.query_kappas, ctx.bank_kappas) else {
                        return Err(Error::Unsupported("match uncertainty needs κ".into()));
                    };
                    let u = match_uncertainty(kq[i], kb[res.indices[rank]], cos, ctx.cap)?;
                    (u.value, u.degenerate)
                }
                Method::L2 => (l2_from_cos(cos), false),
                other => {
                    return Err(Error::Unsupported(format!("{other} has no pairwise form")));
                }
            };
            out.push(ScoredPair {
                query_id: res.query_id,
                reference_id: res.reference_ids[rank],
                rank: rank + 1,
                method,
                score,
                degenerate,
                is_positive: positives[i][rank],
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vmf::DEFAULT_UNCERTAINTY_CAP as CAP;

    #[test]
    fn serialized_names_match_cli_names() {
        for m in Method::ALL {
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
    }

    fn result(sims: Vec<f64>) -> RetrievalResult {
        let k = sims.len();
        RetrievalResult {
            query_id: 0,
            indices: (0..k).collect(),
            reference_ids: (0..k as u64).collect(),
            similarities: sims,
        }
    }

    #[test]
    fn query_examples() {
        assert!((query_uncertainty(5.0, 5.0, 1.0, CAP).unwrap().value - 0.1).abs() < 1e-15);
        let u = query_uncertainty(0.5, 3.0, 0.0, CAP).unwrap().value;
        assert!((u - 1.0 / 10f64.sqrt()).abs() < 1e-15);
        assert!((u - 0.31623).abs() < 1e-5);
        assert!((query_uncertainty(3.0, 4.0, 0.0, CAP).unwrap().value - 0.2).abs() < 1e-15);
    }

    #[test]
    fn inverse_kappa_examples() {
        assert_eq!(query_uncertainty_inverse_kappa(4.0).unwrap(), 0.25);
        assert_eq!(query_uncertainty_inverse_kappa(0.2).unwrap(), 1.0);
        assert_eq!(query_uncertainty_inverse_kappa(1.0).unwrap(), 1.0);
        assert!(query_uncertainty_inverse_kappa(f64::NAN).is_err());
    }

    #[test]
    fn match_examples() {
        assert!((match_uncertainty(10.0, 10.0, 1.0, CAP).unwrap().value - 0.05).abs() < 1e-15);
        let confident = match_uncertainty(10.0, 10.0, 0.5, CAP).unwrap().value;
        let noisy = match_uncertainty(2.0, 2.0, 0.5, CAP).unwrap().value;
        assert!((confident - 1.0 / (10.0 * 3f64.sqrt())).abs() < 1e-15);
        assert!((noisy - 1.0 / (2.0 * 3f64.sqrt())).abs() < 1e-15);
        assert!(confident < noisy);
        let anti = match_uncertainty(7.3, 7.3, -1.0, CAP).unwrap();
        assert!(anti.degenerate && anti.value == CAP);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(baseline_l2(&result(vec![1.0])).unwrap(), 0.0);
        assert!((baseline_l2(&result(vec![0.0])).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((baseline_l2(&result(vec![0.5])).unwrap() - 1.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in 0..=200 {
            let d = l2_from_cos(-1.0 + i as f64 / 100.0);
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn pa_examples() {
        // d = sqrt(2 − 2c): c = 0.875 → 0.5, c = 0.5 → 1.0
        assert!((baseline_pa(&result(vec![0.875, 0.5])).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(baseline_pa(&result(vec![0.3, 0.3])).unwrap(), 1.0);
        assert_eq!(baseline_pa(&result(vec![1.0, 0.2])).unwrap(), 0.0);
        assert_eq!(baseline_pa(&result(vec![1.0, 1.0])).unwrap(), 1.0);
        assert!(baseline_pa(&result(vec![1.0])).is_err());
    }

    #[test]
    fn sue_examples() {
        let same = sue_from_poses(&[0.9, 0.4, 0.1], &[[3.0, 4.0]; 3]).unwrap();
        assert_eq!(same, 0.0);
        assert_eq!(sue_log(same), 0.0);
        let two = sue_from_poses(&[0.5, 0.5], &[[0.0, 0.0], [10.0, 0.0]]).unwrap();
        assert!((two - 25.0).abs() < 1e-12);
        assert!((sue_log(two) - 26f64.ln()).abs() < 1e-12);
        let poses = [[0.0, 0.0], [10.0, 3.0], [-4.0, 8.0]];
        let a = sue_from_poses(&[0.9, 0.6, 0.1], &poses).unwrap();
        let b = sue_from_poses(&[1.4, 1.1, 0.6], &poses).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn sue_requires_poses() {
        let units = vec![crate::vmf::UnitDescriptor::basis(2, 0).unwrap(); 1];
        let bank = DescriptorBank::from_descriptors(&units, vec![0], vec![0], None).unwrap();
        let r = result(vec![1.0, 0.5]);
        assert!(matches!(baseline_sue(&r, &bank, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn symmetric_and_monotone() {
        for &(a, b) in &[(1.0, 7.0), (2.5, 300.0), (45.0, 45.0)] {
            for &c in &[-0.9, -0.2, 0.0, 0.4, 1.0] {
                let x = match_uncertainty(a, b, c, CAP).unwrap().value;
                let y = match_uncertainty(b, a, c, CAP).unwrap().value;
                assert_eq!(x.to_bits(), y.to_bits());
                if c >= 0.0 {
                    assert!(match_uncertainty(a * 1.5, b, c, CAP).unwrap().value <= x);
                }
            }
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Method::parse("SUE-log").unwrap(), Method::SueLog);
        assert!(Method::parse("stun").is_err());
    }
}
