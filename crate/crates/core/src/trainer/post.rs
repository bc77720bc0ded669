//! Post-training: only the κ-head learns, against frozen descriptors.

use rayon::prelude::*;

use super::{epoch_order, gnll_loss, EarlyStop, EpochMetrics, HistoryRow, Phase, TrainConfig, TrainMode};
use super::adam::{adam_step, AdamState};
use crate::anchoring::{batch_centroid_anchor, AnchorMode, PrototypeSet};
use crate::digest::hash_f64s;
use crate::error::{Error, Result};
use crate::head::{head_backward_from, head_trace, FeatureMap, HeadParams};
use crate::linalg::dot;
use crate::vmf::{stable_log_partition, stable_log_partition_grad, BesselOrder, UnitDescriptor};

#[derive(Debug, Clone, Copy)]
pub struct PostSample<'a> {
    pub features: &'a FeatureMap,
    pub descriptor: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct PostOutcome {
    pub head: HeadParams,
    pub optimizer: AdamState,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
}

/// Per-sample loss and flat head gradient. The vMF variant uses
/// `A(κ) − κ μᵀz`, the Gaussian variant `‖z − μ‖²/(2σ²) + (d/2) ln σ²` with
/// the head output read as σ².
pub(crate) fn post_sample_grad(
    head: &HeadParams,
    sample: &PostSample<'_>,
    mu: &[f64],
    mode: TrainMode,
    order: BesselOrder,
) -> Result<(f64, Vec<f64>)> {
    let trace = head_trace(sample.features, head)?;
    let out = trace.kappa;
    let (loss, upstream) = match mode {
        TrainMode::GnllVariant => {
            let g = gnll_loss(sample.descriptor, mu, out)?;
            (g.loss, g.grad_sigma_sq)
        }
        _ => {
            let c = dot(mu, sample.descriptor);
            let loss = stable_log_partition(out, order)? - out * c;
            (loss, stable_log_partition_grad(out, order)? - c)
        }
    };
    Ok((loss, head_backward_from(sample.features, head, &trace, upstream).to_flat()))
}

fn resolve_anchors(
    batch: &[usize],
    samples: &[PostSample<'_>],
    prototypes: &PrototypeSet,
    cfg: &TrainConfig,
) -> Result<Vec<Option<Vec<f64>>>> {
    match cfg.anchor_mode {
        AnchorMode::ClassPrototype => batch
            .iter()
            .map(|&i| Ok(Some(prototypes.class_anchor(samples[i].label)?.as_slice().to_vec())))
            .collect(),
        AnchorMode::BatchCentroid => {
            let units: Vec<UnitDescriptor> = batch
                .iter()
                .map(|&i| UnitDescriptor::normalize(samples[i].descriptor.to_vec()))
                .collect::<Result<_>>()?;
            batch
                .iter()
                .enumerate()
                .map(|(a, &i)| {
                    let positives: Vec<&UnitDescriptor> = batch
                        .iter()
                        .enumerate()
                        .filter(|&(b, &j)| {
                            samples[j].label == samples[i].label && (b != a || cfg.include_self_in_centroid)
                        })
                        .map(|(b, _)| &units[b])
                        .collect();
                    if positives.is_empty() {
                        // no positive in this batch: the sample gets no supervision
                        return Ok(None);
                    }
                    Ok(Some(batch_centroid_anchor(&positives)?.into_inner()))
                })
                .collect()
        }
    }
}

/// Mean loss over one pass in the batching of `epoch`, without updates.
fn mean_loss(
    head: &HeadParams,
    samples: &[PostSample<'_>],
    prototypes: &PrototypeSet,
    cfg: &TrainConfig,
    order: BesselOrder,
    epoch: usize,
) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for batch in epoch_order(samples.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
        let anchors = resolve_anchors(batch, samples, prototypes, cfg)?;
        for (&i, mu) in batch.iter().zip(&anchors) {
            if let Some(mu) = mu {
                sum += post_sample_grad(head, &samples[i], mu, cfg.mode, order)?.0;
                count += 1;
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Trains `head` and returns the checkpoint with the lowest validation
/// ECE@1 reported by `eval_hook`.
pub fn train_post(
    samples: &[PostSample<'_>],
    prototypes: &PrototypeSet,
    mut head: HeadParams,
    cfg: &TrainConfig,
    eval_hook: &mut dyn FnMut(&HeadParams) -> Result<EpochMetrics>,
) -> Result<PostOutcome> {
    cfg.validate()?;
    if !matches!(cfg.mode, TrainMode::PostTraining | TrainMode::GnllVariant) {
        return Err(Error::Config(format!("train_post cannot run mode {:?}", cfg.mode)));
    }
    if samples.is_empty() {
        return Err(Error::Domain("post-training needs at least one sample".into()));
    }
    for s in samples {
        prototypes.class_anchor(s.label)?;
        if s.descriptor.len() != prototypes.dim() {
            return Err(Error::Shape("descriptor and prototype dimensions differ".into()));
        }
    }
    head.train_gem_p = cfg.train_gem_p;
    let order = BesselOrder::new(prototypes.dim())?;
    let mut flat = head.to_flat();
    let mut state = AdamState::new(flat.len());

    let initial = eval_hook(&head)?;
    let mut stop = EarlyStop::new(cfg.patience, false);
    stop.observe(0, initial.ece_at_1);
    let mut best = (head.clone(), state.clone());
    let mut history = vec![HistoryRow {
        epoch: 0,
        phase: Phase::Calibration,
        loss_vmf: mean_loss(&head, samples, prototypes, cfg, order, 0)?,
        loss_cls: 0.0,
        recall_at_1: initial.recall_at_1,
        ece_at_1: initial.ece_at_1,
        param_hash: hash_f64s(&flat),
    }];

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in epoch_order(samples.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let anchors = resolve_anchors(batch, samples, prototypes, cfg)?;
            let per_sample: Vec<Option<(f64, Vec<f64>)>> = batch
                .par_iter()
                .zip(anchors.par_iter())
                .map(|(&i, mu)| {
                    mu.as_ref()
                        .map(|mu| post_sample_grad(&head, &samples[i], mu, cfg.mode, order))
                        .transpose()
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; flat.len()];
            let mut used = 0usize;
            for (loss, g) in per_sample.into_iter().flatten() {
                epoch_loss += loss;
                used += 1;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            if used == 0 {
                continue;
            }
            epoch_count += used;
            grad.iter_mut().for_each(|g| *g /= used as f64);
            adam_step(&mut flat, &grad, &mut state, cfg.lr, &cfg.adam)?;
            head.set_flat(&flat)?;
            flat = head.to_flat();
        }
        let metrics = eval_hook(&head)?;
        if stop.observe(epoch, metrics.ece_at_1) {
            best = (head.clone(), state.clone());
        }
        history.push(HistoryRow {
            epoch,
            phase: Phase::Calibration,
            loss_vmf: epoch_loss / epoch_count.max(1) as f64,
            loss_cls: 0.0,
            recall_at_1: metrics.recall_at_1,
            ece_at_1: metrics.ece_at_1,
            param_hash: hash_f64s(&flat),
        });
        if stop.exhausted() {
            break;
        }
    }
    Ok(PostOutcome {
        head: best.0,
        optimizer: best.1,
        history,
        best_epoch: stop.best_epoch(),
    })
}
