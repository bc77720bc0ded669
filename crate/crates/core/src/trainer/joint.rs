//! Joint training of encoder, prototypes and κ-head under
//! `L_cls + λ·L_vMF`, with a phased early-stopping schedule: phase one
//! tracks Recall@1, phase two restarts from the best phase-one checkpoint
//! with fresh patience and tracks ECE@1.

use rayon::prelude::*;

use super::adam::{adam_step, AdamState};
use super::encoder::LinearEncoder;
use super::lmcl::{lmcl_loss_raw, LmclConfig};
use super::{epoch_order, EarlyStop, EpochMetrics, HistoryRow, Phase, TrainConfig, TrainMode};
use crate::anchoring::{AnchorMode, PrototypeSet};
use crate::digest::StateHasher;
use crate::error::{Error, Result};
use crate::head::{head_backward_from, head_trace, FeatureMap, HeadParams};
use crate::linalg::dot;
use crate::vmf::{stable_log_partition, stable_log_partition_grad, BesselOrder};

#[derive(Debug, Clone, Copy)]
pub struct JointSample<'a> {
    pub raw: &'a [f64],
    pub features: &'a FeatureMap,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub encoder: LinearEncoder,
    pub prototypes: PrototypeSet,
    pub head: HeadParams,
    pub optimizers: [AdamState; 3],
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    /// First epoch of phase two, if it was reached.
    pub phase_two_start: Option<usize>,
}

#[derive(Clone)]
struct Checkpoint {
    encoder: LinearEncoder,
    prototypes: Vec<f64>,
    head: HeadParams,
    states: [AdamState; 3],
}

pub(crate) struct JointGrads {
    pub loss_cls: f64,
    pub loss_vmf: f64,
    pub encoder: Vec<f64>,
    pub prototypes: Vec<f64>,
    pub head: Vec<f64>,
}

/// Loss terms and gradients of one sample. With `lambda = None` the vMF term
/// is not evaluated at all.
pub(crate) fn joint_sample_grad(
    encoder: &LinearEncoder,
    prototypes: &[f64],
    head: &HeadParams,
    sample: &JointSample<'_>,
    lmcl: &LmclConfig,
    lambda: Option<f64>,
) -> Result<JointGrads> {
    let d = encoder.output_dim;
    let (z, pre_norm) = encoder.forward(sample.raw)?;
    let z = z.as_slice();
    let cls = lmcl_loss_raw(z, prototypes, d, sample.label, lmcl)?;
    let mut gz = cls.grad_embedding;
    let mut gp = cls.grad_prototypes;
    let mut gh = vec![0.0; head.num_params()];
    let mut loss_vmf = 0.0;
    if let Some(lambda) = lambda {
        let order = BesselOrder::new(d)?;
        let trace = head_trace(sample.features, head)?;
        let kappa = trace.kappa;
        let row = sample.label * d;
        let mu = &prototypes[row..row + d];
        let c = dot(mu, z);
        loss_vmf = stable_log_partition(kappa, order)? - kappa * c;
        for k in 0..d {
            gz[k] -= lambda * kappa * mu[k];
            gp[row + k] -= lambda * kappa * z[k];
        }
        let upstream = lambda * (stable_log_partition_grad(kappa, order)? - c);
        gh = head_backward_from(sample.features, head, &trace, upstream).to_flat();
    }
    let mut ge = vec![0.0; encoder.weights.len()];
    encoder.backward_into(sample.raw, z, pre_norm, &gz, &mut ge);
    Ok(JointGrads {
        loss_cls: cls.loss,
        loss_vmf,
        encoder: ge,
        prototypes: gp,
        head: gh,
    })
}

fn renormalize_rows(m: &mut [f64], d: usize) {
    for row in m.chunks_exact_mut(d) {
        let n = crate::linalg::norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn state_hash(enc: &LinearEncoder, protos: &[f64], head: &HeadParams) -> String {
    StateHasher::new()
        .f64s(&enc.weights)
        .f64s(protos)
        .f64s(&head.to_flat())
        .hex()
}

pub fn train_joint(
    samples: &[JointSample<'_>],
    encoder: LinearEncoder,
    prototypes: PrototypeSet,
    mut head: HeadParams,
    cfg: &TrainConfig,
    lmcl: &LmclConfig,
    eval_hook: &mut dyn FnMut(&LinearEncoder, &PrototypeSet, &HeadParams) -> Result<EpochMetrics>,
) -> Result<JointOutcome> {
    cfg.validate()?;
    lmcl.validate()?;
    if !matches!(cfg.mode, TrainMode::JointTraining | TrainMode::ClassificationOnly) {
        return Err(Error::Config(format!("train_joint cannot run mode {:?}", cfg.mode)));
    }
    if cfg.anchor_mode != AnchorMode::ClassPrototype {
        return Err(Error::Config("joint training anchors on class prototypes only".into()));
    }
    if samples.is_empty() {
        return Err(Error::Domain("joint training needs at least one sample".into()));
    }
    let d = prototypes.dim();
    if encoder.output_dim != d {
        return Err(Error::Shape("encoder output and prototype dimensions differ".into()));
    }
    for s in samples {
        prototypes.class_anchor(s.label)?;
    }
    head.train_gem_p = cfg.train_gem_p;
    let lambda = match cfg.mode {
        TrainMode::JointTraining if cfg.lambda > 0.0 => Some(cfg.lambda),
        _ => None,
    };

    let mut enc = encoder;
    let mut protos = prototypes.to_matrix();
    let mut head_flat = head.to_flat();
    let mut states = [
        AdamState::new(enc.weights.len()),
        AdamState::new(protos.len()),
        AdamState::new(head_flat.len()),
    ];

    let snapshot = |enc: &LinearEncoder, protos: &[f64], head: &HeadParams, states: &[AdamState; 3]| Checkpoint {
        encoder: enc.clone(),
        prototypes: protos.to_vec(),
        head: head.clone(),
        states: states.clone(),
    };

    let initial = eval_hook(&enc, &PrototypeSet::from_matrix(&protos, d)?, &head)?;
    let mut phase = Phase::Recall;
    let mut stop = EarlyStop::new(cfg.patience, true);
    stop.observe(0, initial.recall_at_1);
    let mut best = snapshot(&enc, &protos, &head, &states);
    let mut phase_two_start = None;
    let initial_losses: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| joint_sample_grad(&enc, &protos, &head, s, lmcl, lambda).map(|g| (g.loss_cls, g.loss_vmf)))
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mut history = vec![HistoryRow {
        epoch: 0,
        phase,
        loss_vmf: initial_losses.iter().map(|l| l.1).sum::<f64>() / n,
        loss_cls: initial_losses.iter().map(|l| l.0).sum::<f64>() / n,
        recall_at_1: initial.recall_at_1,
        ece_at_1: initial.ece_at_1,
        param_hash: state_hash(&enc, &protos, &head),
    }];
    let mut best_metrics = initial;
    let mut best_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        let (mut sum_cls, mut sum_vmf) = (0.0, 0.0);
        for batch in epoch_order(samples.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let per_sample: Vec<JointGrads> = batch
                .par_iter()
                .map(|&i| joint_sample_grad(&enc, &protos, &head, &samples[i], lmcl, lambda))
                .collect::<Result<_>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut ge = vec![0.0; enc.weights.len()];
            let mut gp = vec![0.0; protos.len()];
            let mut gh = vec![0.0; head_flat.len()];
            for g in &per_sample {
                sum_cls += g.loss_cls;
                sum_vmf += g.loss_vmf;
                ge.iter_mut().zip(&g.encoder).for_each(|(a, b)| *a += b * inv);
                gp.iter_mut().zip(&g.prototypes).for_each(|(a, b)| *a += b * inv);
                gh.iter_mut().zip(&g.head).for_each(|(a, b)| *a += b * inv);
            }
            adam_step(&mut enc.weights, &ge, &mut states[0], cfg.joint_lr, &cfg.adam)?;
            adam_step(&mut protos, &gp, &mut states[1], cfg.joint_lr, &cfg.adam)?;
            renormalize_rows(&mut protos, d);
            if lambda.is_some() {
                adam_step(&mut head_flat, &gh, &mut states[2], cfg.lr, &cfg.adam)?;
                head.set_flat(&head_flat)?;
                head_flat = head.to_flat();
            }
        }
        let proto_set = PrototypeSet::from_matrix(&protos, d)?;
        let metrics = eval_hook(&enc, &proto_set, &head)?;
        let tracked = match phase {
            Phase::Recall => metrics.recall_at_1,
            Phase::Calibration => metrics.ece_at_1,
        };
        if stop.observe(epoch, tracked) {
            best = snapshot(&enc, &protos, &head, &states);
            best_metrics = metrics;
            best_epoch = epoch;
        }
        history.push(HistoryRow {
            epoch,
            phase,
            loss_vmf: if lambda.is_some() { sum_vmf / n } else { 0.0 },
            loss_cls: sum_cls / n,
            recall_at_1: metrics.recall_at_1,
            ece_at_1: metrics.ece_at_1,
            param_hash: state_hash(&enc, &protos, &head),
        });
        if stop.exhausted() {
            match phase {
                Phase::Recall => {
                    // restart from the best recall checkpoint, now tracking ECE@1
                    enc = best.encoder.clone();
                    protos = best.prototypes.clone();
                    head = best.head.clone();
                    head_flat = head.to_flat();
                    states = best.states.clone();
                    phase = Phase::Calibration;
                    phase_two_start = Some(epoch + 1);
                    stop = EarlyStop::new(cfg.patience, false);
                    stop.observe(best_epoch, best_metrics.ece_at_1);
                }
                Phase::Calibration => break,
            }
        }
    }
    Ok(JointOutcome {
        prototypes: PrototypeSet::from_matrix(&best.prototypes, d)?,
        encoder: best.encoder,
        head: best.head,
        optimizers: best.states,
        history,
        best_epoch,
        phase_two_start,
    })
}
