//! End-to-end glue: validation hooks, fitting on synthetic scenes, and the
//! query- and match-level evaluation used by the CLI.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchoring::PrototypeSet;
use crate::calibration::{ece_at_k, match_ece_at_k, BinningConfig, CalibrationReport};
use crate::digest::StateHasher;
use crate::error::{Error, Result};
use crate::head::{head_forward, FeatureMap, HeadParams};
use crate::linalg::dot;
use crate::retrieval::{knn_all, recall_from_flags, success_at, DescriptorBank, GroundTruth, RetrievalResult};
use crate::scores::{score_pairs, score_queries, Method, ScoreContext};
use crate::synth::{Split, SynthDataset};
use crate::trainer::{
    train_joint, train_post, EpochMetrics, JointOutcome, JointSample, LinearEncoder, LmclConfig, PostOutcome,
    PostSample, TrainConfig, TrainMode,
};
use crate::vmf::{invert_log_partition_grad, BesselOrder, UnitDescriptor, DEFAULT_UNCERTAINTY_CAP};

/// Head output for every feature map, in order.
pub fn predict(head: &HeadParams, features: &[&FeatureMap]) -> Result<Vec<f64>> {
    features.par_iter().map(|fm| head_forward(fm, head)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub binning: BinningConfig,
    pub methods: Vec<Method>,
    /// Neighbours used by the SUE baseline.
    pub sue_k: usize,
    pub uncertainty_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            binning: BinningConfig::default(),
            methods: vec![
                Method::KappaPlace,
                Method::InverseKappa,
                Method::L2,
                Method::Pa,
                Method::Sue,
                Method::SueLog,
            ],
            sue_k: 10,
            uncertainty_cap: DEFAULT_UNCERTAINTY_CAP,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.binning.validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("K list must be non-empty and positive".into()));
        }
        if self.sue_k < 2 {
            return Err(Error::Config("sue_k must be ≥ 2".into()));
        }
        Ok(())
    }

    /// Retrieval depth needed by all requested K and baselines.
    pub fn depth(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1).max(self.sue_k).max(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum MethodOutcome {
    Ok { reports: Vec<CalibrationReport> },
    Unsupported { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    pub method: Method,
    #[serde(flatten)]
    pub outcome: MethodOutcome,
}

impl MethodEntry {
    pub fn ece(&self, k: usize) -> Option<f64> {
        match &self.outcome {
            MethodOutcome::Ok { reports } => reports.iter().find(|r| r.k == k).map(|r| r.ece),
            MethodOutcome::Unsupported { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEvaluation {
    pub num_queries: usize,
    pub recall: BTreeMap<usize, f64>,
    pub methods: Vec<MethodEntry>,
    /// Digest of every retrieval result.
    pub retrieval_hash: String,
}

impl QueryEvaluation {
    pub fn method(&self, m: Method) -> Option<&MethodEntry> {
        self.methods.iter().find(|e| e.method == m)
    }
}

/// What the head's output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOutput {
    #[default]
    Kappa,
    /// σ² of the Gaussian ablation head.
    Variance,
}

impl HeadOutput {
    /// Why `method` cannot use this output, if it cannot.
    fn incompatible(self, method: Method) -> Option<String> {
        match (self, method) {
            (HeadOutput::Variance, Method::KappaPlace | Method::InverseKappa) => {
                Some(format!("{method} needs κ but the head predicts σ²"))
            }
            (HeadOutput::Kappa, Method::Gnll) => Some("gnll needs a σ² head".into()),
            _ => None,
        }
    }
}

/// Everything needed to score one query set against one database.
pub struct EvalInputs<'a> {
    pub queries: &'a DescriptorBank,
    pub database: &'a DescriptorBank,
    pub ground_truth: &'a GroundTruth,
    /// Head output per query (κ, or σ² for the Gaussian head).
    pub query_kappas: Option<&'a [f64]>,
    pub database_kappas: Option<&'a [f64]>,
    pub output: HeadOutput,
}

pub struct Retrieved {
    pub results: Vec<RetrievalResult>,
    pub positives: Vec<Vec<bool>>,
}

pub fn retrieve(inputs: &EvalInputs<'_>, depth: usize) -> Result<Retrieved> {
    let depth = depth.min(inputs.database.len());
    let results = knn_all(inputs.queries, inputs.database, depth)?;
    let positives = inputs.ground_truth.mark(&results, inputs.queries, inputs.database)?;
    Ok(Retrieved { results, positives })
}

/// Recall@K and per-method query-level ECE@K.
pub fn evaluate_queries(inputs: &EvalInputs<'_>, cfg: &EvalConfig) -> Result<QueryEvaluation> {
    cfg.validate()?;
    let retrieved = retrieve(inputs, cfg.depth())?;
    evaluate_retrieved(inputs, &retrieved, cfg)
}

pub fn evaluate_retrieved(
    inputs: &EvalInputs<'_>,
    retrieved: &Retrieved,
    cfg: &EvalConfig,
) -> Result<QueryEvaluation> {
    let mut recall = BTreeMap::new();
    for &k in &cfg.ks {
        recall.insert(k, recall_from_flags(&retrieved.positives, k)?);
    }
    let ctx = ScoreContext {
        results: &retrieved.results,
        bank: inputs.database,
        query_kappas: inputs.query_kappas,
        bank_kappas: inputs.database_kappas,
        sue_k: cfg.sue_k,
        cap: cfg.uncertainty_cap,
    };
    let mut methods = Vec::new();
    for &method in &cfg.methods {
        if let Some(reason) = inputs.output.incompatible(method) {
            methods.push(MethodEntry {
                method,
                outcome: MethodOutcome::Unsupported { reason },
            });
            continue;
        }
        let outcome = match score_queries(method, &ctx) {
            Ok(scored) => {
                let mut reports = Vec::new();
                for &k in &cfg.ks {
                    let flags: Vec<bool> = retrieved.positives.iter().map(|f| success_at(f, k)).collect();
                    reports.push(ece_at_k(&scored, &flags, k, &cfg.binning)?);
                }
                MethodOutcome::Ok { reports }
            }
            Err(Error::Unsupported(reason)) => MethodOutcome::Unsupported { reason },
            Err(e) => return Err(e),
        };
        methods.push(MethodEntry { method, outcome });
    }
    Ok(QueryEvaluation {
        num_queries: retrieved.results.len(),
        recall,
        methods,
        retrieval_hash: StateHasher::new().results(&retrieved.results).hex(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEvaluation {
    pub num_queries: usize,
    pub methods: Vec<MethodEntry>,
}

/// Match-level ECE@K for the resultant kernel and the pairwise L2 score.
pub fn evaluate_matches(inputs: &EvalInputs<'_>, cfg: &EvalConfig) -> Result<MatchEvaluation> {
    cfg.validate()?;
    let depth = cfg.ks.iter().copied().max().unwrap_or(1);
    let retrieved = retrieve(inputs, depth)?;
    let ctx = ScoreContext {
        results: &retrieved.results,
        bank: inputs.database,
        query_kappas: inputs.query_kappas,
        bank_kappas: inputs.database_kappas,
        sue_k: cfg.sue_k,
        cap: cfg.uncertainty_cap,
    };
    let mut methods = Vec::new();
    for method in [Method::KappaPlace, Method::L2] {
        if !cfg.methods.contains(&method) {
            continue;
        }
        let mut reports = Vec::new();
        let mut unsupported = inputs.output.incompatible(method);
        for &k in cfg.ks.iter().filter(|_| unsupported.is_none()) {
            match score_pairs(method, &ctx, &retrieved.positives, k) {
                Ok(pairs) => reports.push(match_ece_at_k(&pairs, k, retrieved.results.len(), &cfg.binning)?),
                Err(Error::Unsupported(r)) => {
                    unsupported = Some(r);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let outcome = match unsupported {
            Some(reason) => MethodOutcome::Unsupported { reason },
            None => MethodOutcome::Ok { reports },
        };
        methods.push(MethodEntry { method, outcome });
    }
    Ok(MatchEvaluation {
        num_queries: retrieved.results.len(),
        methods,
    })
}

/// Splits training indices into fitting and validation parts, fixed by seed.
pub fn validation_split(train: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7a1);
    shuffled.shuffle(&mut rng);
    let n_val = ((train.len() as f64) * fraction).round() as usize;
    let mut val = shuffled[..n_val].to_vec();
    let mut fit = shuffled[n_val..].to_vec();
    val.sort_unstable();
    fit.sort_unstable();
    (fit, val)
}

fn output_method(mode: TrainMode) -> Method {
    match mode {
        TrainMode::GnllVariant => Method::Gnll,
        _ => Method::KappaPlace,
    }
}

/// ECE@1 of the head's score on a fixed query/database pair.
fn validation_metrics(
    method: Method,
    threshold: f64,
    queries: &DescriptorBank,
    database: &DescriptorBank,
    retrieved: &Retrieved,
    query_kappas: &[f64],
    database_kappas: &[f64],
) -> Result<EpochMetrics> {
    let cfg = EvalConfig {
        ks: vec![1],
        methods: vec![method],
        ..EvalConfig::default()
    };
    let inputs = EvalInputs {
        queries,
        database,
        ground_truth: &GroundTruth::DistanceThreshold(threshold),
        query_kappas: Some(query_kappas),
        database_kappas: Some(database_kappas),
        output: if method == Method::Gnll {
            HeadOutput::Variance
        } else {
            HeadOutput::Kappa
        },
    };
    let eval = evaluate_retrieved(&inputs, retrieved, &cfg)?;
    let ece = eval.methods[0]
        .ece(1)
        .ok_or_else(|| Error::Domain("validation score unsupported".into()))?;
    Ok(EpochMetrics {
        recall_at_1: eval.recall[&1],
        ece_at_1: ece,
    })
}

/// Initial head output: the κ whose Amos ratio matches the mean alignment,
/// or the mean per-dimension squared residual for the Gaussian head.
pub fn initial_output(mode: TrainMode, zs: &[&[f64]], mus: &[&[f64]]) -> Result<f64> {
    let d = mus.first().map(|m| m.len()).unwrap_or(2);
    let n = zs.len().max(1) as f64;
    match mode {
        TrainMode::GnllVariant => {
            let sq: f64 = zs
                .iter()
                .zip(mus)
                .map(|(z, m)| z.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum();
            Ok((sq / n / d as f64).max(1e-6))
        }
        _ => {
            let r = zs.iter().zip(mus).map(|(z, m)| dot(z, m)).sum::<f64>() / n;
            let r = r.clamp(1e-3, 1.0 - 1e-6);
            Ok(invert_log_partition_grad(r, BesselOrder::new(d)?)?.max(1.0))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PostFit {
    pub outcome: PostOutcome,
    pub fit_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Post-trains a fresh head on the training split of a scene against its
/// generative prototypes.
pub fn fit_post(ds: &SynthDataset, cfg: &TrainConfig) -> Result<PostFit> {
    fit_post_with(ds, &ds.prototypes, &ds.bank, cfg)
}

/// As [`fit_post`] with explicit prototypes and descriptors (for heads
/// trained on top of a jointly trained encoder).
pub fn fit_post_with(
    ds: &SynthDataset,
    prototypes: &PrototypeSet,
    descriptors: &DescriptorBank,
    cfg: &TrainConfig,
) -> Result<PostFit> {
    let (fit, val) = validation_split(&ds.indices(Split::Train), cfg.validation_fraction, cfg.seed);
    if fit.is_empty() || val.is_empty() {
        return Err(Error::Config("training split too small for a validation hold-out".into()));
    }
    let samples: Vec<PostSample> = fit
        .iter()
        .map(|&i| PostSample {
            features: &ds.features[i],
            descriptor: descriptors.row(i),
            label: descriptors.labels()[i],
        })
        .collect();
    let zs: Vec<&[f64]> = samples.iter().map(|s| s.descriptor).collect();
    let mus: Vec<&[f64]> = samples
        .iter()
        .map(|s| prototypes.class_anchor(s.label).map(|w| w.as_slice()))
        .collect::<Result<_>>()?;
    let init = initial_output(cfg.mode, &zs, &mus)?;
    let head = HeadParams::init(cfg.head_variant, ds.config.feature_shape, cfg.hidden, init, cfg.seed)?;

    let db_idx = ds.indices(Split::Database);
    let val_bank = descriptors.subset(&val);
    let db_bank = descriptors.subset(&db_idx);
    let inputs = EvalInputs {
        queries: &val_bank,
        database: &db_bank,
        ground_truth: &GroundTruth::DistanceThreshold(ds.config.threshold),
        query_kappas: None,
        database_kappas: None,
        output: HeadOutput::Kappa,
    };
    // descriptors are frozen, so retrieval is computed once
    let retrieved = retrieve(&inputs, 2)?;
    let val_fms: Vec<&FeatureMap> = val.iter().map(|&i| &ds.features[i]).collect();
    let db_fms: Vec<&FeatureMap> = db_idx.iter().map(|&i| &ds.features[i]).collect();
    let method = output_method(cfg.mode);
    let mut hook = |h: &HeadParams| -> Result<EpochMetrics> {
        let qk = predict(h, &val_fms)?;
        let dk = predict(h, &db_fms)?;
        validation_metrics(method, ds.config.threshold, &val_bank, &db_bank, &retrieved, &qk, &dk)
    };
    let outcome = train_post(&samples, prototypes, head, cfg, &mut hook)?;
    Ok(PostFit {
        outcome,
        fit_indices: fit,
        validation_indices: val,
    })
}

/// Encodes every image of the scene.
pub fn encode_all(ds: &SynthDataset, encoder: &LinearEncoder) -> Result<DescriptorBank> {
    reencode(&ds.bank, encoder, &ds.raw)
}

/// A bank with `template`'s metadata whose rows are `encoder` applied to the
/// row-major raw inputs.
pub fn reencode(template: &DescriptorBank, encoder: &LinearEncoder, raw: &[f64]) -> Result<DescriptorBank> {
    let m = encoder.input_dim;
    if raw.len() != template.len() * m {
        return Err(Error::Shape(format!(
            "{} raw values for {} rows of width {m}",
            raw.len(),
            template.len()
        )));
    }
    let units: Vec<UnitDescriptor> = raw
        .par_chunks(m)
        .map(|r| encoder.encode(r))
        .collect::<Result<_>>()?;
    let mut bank = DescriptorBank::from_descriptors(
        &units,
        template.ids().to_vec(),
        template.labels().to_vec(),
        template.poses().map(|p| p.to_vec()),
    )?;
    if let Some(k) = template.true_kappa() {
        bank = bank.with_true_kappa(k.to_vec())?;
    }
    bank.set_kappas(template.kappas().map(|k| k.to_vec()))?;
    Ok(bank)
}

#[derive(Debug, Clone)]
pub struct JointFit {
    pub outcome: JointOutcome,
    pub fit_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Random unit prototypes for joint training.
pub fn random_prototypes(classes: usize, dim: usize, seed: u64) -> Result<PrototypeSet> {
    let enc = LinearEncoder::random(dim, classes, seed ^ 0x9e37_79b9)?;
    PrototypeSet::from_matrix(&enc.weights, dim)
}

/// Joint (or classification-only) training from a random encoder and random
/// prototypes.
pub fn fit_joint(ds: &SynthDataset, cfg: &TrainConfig, lmcl: &LmclConfig) -> Result<JointFit> {
    let (fit, val) = validation_split(&ds.indices(Split::Train), cfg.validation_fraction, cfg.seed);
    if fit.is_empty() || val.is_empty() {
        return Err(Error::Config("training split too small for a validation hold-out".into()));
    }
    let d = ds.config.descriptor_dim;
    let encoder = LinearEncoder::random(ds.config.raw_dim, d, cfg.seed)?;
    let prototypes = random_prototypes(ds.prototypes.num_classes(), d, cfg.seed)?;
    let samples: Vec<JointSample> = fit
        .iter()
        .map(|&i| JointSample {
            raw: ds.raw_row(i),
            features: &ds.features[i],
            label: ds.bank.labels()[i],
        })
        .collect();
    let head = HeadParams::init(cfg.head_variant, ds.config.feature_shape, cfg.hidden, 1.0, cfg.seed)?;

    let db_idx = ds.indices(Split::Database);
    let val_fms: Vec<&FeatureMap> = val.iter().map(|&i| &ds.features[i]).collect();
    let db_fms: Vec<&FeatureMap> = db_idx.iter().map(|&i| &ds.features[i]).collect();
    let mut hook = |enc: &LinearEncoder, _: &PrototypeSet, h: &HeadParams| -> Result<EpochMetrics> {
        let all = encode_subset(ds, enc, &val, &db_idx)?;
        let inputs = EvalInputs {
            queries: &all.0,
            database: &all.1,
            ground_truth: &GroundTruth::DistanceThreshold(ds.config.threshold),
            query_kappas: None,
            database_kappas: None,
            output: HeadOutput::Kappa,
        };
        let retrieved = retrieve(&inputs, 2)?;
        let qk = predict(h, &val_fms)?;
        let dk = predict(h, &db_fms)?;
        validation_metrics(Method::KappaPlace, ds.config.threshold, &all.0, &all.1, &retrieved, &qk, &dk)
    };
    let outcome = train_joint(&samples, encoder, prototypes, head, cfg, lmcl, &mut hook)?;
    Ok(JointFit {
        outcome,
        fit_indices: fit,
        validation_indices: val,
    })
}

fn encode_subset(
    ds: &SynthDataset,
    enc: &LinearEncoder,
    queries: &[usize],
    database: &[usize],
) -> Result<(DescriptorBank, DescriptorBank)> {
    let build = |idx: &[usize]| -> Result<DescriptorBank> {
        let units: Vec<UnitDescriptor> = idx
            .par_iter()
            .map(|&i| enc.encode(ds.raw_row(i)))
            .collect::<Result<_>>()?;
        let src = ds.bank.subset(idx);
        DescriptorBank::from_descriptors(
            &units,
            src.ids().to_vec(),
            src.labels().to_vec(),
            src.poses().map(|p| p.to_vec()),
        )
    };
    Ok((build(queries)?, build(database)?))
}

/// Query/database evaluation of a trained head on a scene's held-out queries.
pub fn evaluate_scene(
    ds: &SynthDataset,
    descriptors: &DescriptorBank,
    head: Option<(&HeadParams, HeadOutput)>,
    cfg: &EvalConfig,
) -> Result<(QueryEvaluation, MatchEvaluation)> {
    let q_idx = ds.indices(Split::Query);
    let db_idx = ds.indices(Split::Database);
    let queries = descriptors.subset(&q_idx);
    let database = descriptors.subset(&db_idx);
    let (qk, dk) = match head {
        Some((h, _)) => {
            let qf: Vec<&FeatureMap> = q_idx.iter().map(|&i| &ds.features[i]).collect();
            let df: Vec<&FeatureMap> = db_idx.iter().map(|&i| &ds.features[i]).collect();
            (Some(predict(h, &qf)?), Some(predict(h, &df)?))
        }
        None => (None, None),
    };
    let gt = GroundTruth::DistanceThreshold(ds.config.threshold);
    let inputs = EvalInputs {
        queries: &queries,
        database: &database,
        ground_truth: &gt,
        query_kappas: qk.as_deref(),
        database_kappas: dk.as_deref(),
        output: head.map(|h| h.1).unwrap_or_default(),
    };
    Ok((evaluate_queries(&inputs, cfg)?, evaluate_matches(&inputs, cfg)?))
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}
