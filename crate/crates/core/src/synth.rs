//! Synthetic place-recognition scenes with known prototypes and known
//! per-image concentrations.
//!
//! Every image `i` of class `j` draws an ambiguity `aᵢ ~ U[0, 1]`, gets the
//! concentration `κ*ᵢ = κ_min + (κ_max − κ_min)(1 − aᵢ)` and a descriptor
//! `zᵢ ~ vMF(w_j, κ*ᵢ)`. Channel 0 of its feature map is the smooth monotone
//! embedding `φ(a) = 0.25 + 1.5a` at every position; the other channels are
//! nuisance. Raw encoder inputs are `rᵢ = M zᵢ` for a fixed random mixing `M`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anchoring::PrototypeSet;
use crate::error::{Error, Result};
use crate::head::{FeatureMap, FeatureShape};
use crate::linalg::{matvec, norm};
use crate::retrieval::{DescriptorBank, DEFAULT_THRESHOLD};
use crate::vmf::{sample_vmf_with, UnitDescriptor, VmfParams};

/// Largest pairwise `|cos|` allowed between generated prototypes.
pub const PROTOTYPE_SEPARATION: f64 = 0.5;
const PROTOTYPE_ATTEMPTS: usize = 10_000;

// Stream ids keep the independent random draws of a scene apart.
const STREAM_PROTOTYPES: u64 = 1;
const STREAM_MIXING: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_ALIASING: u64 = 4;
const STREAM_IMAGES: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub database: f64,
    pub query: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.5,
            database: 0.3,
            query: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub descriptor_dim: usize,
    /// Dimension of the raw encoder inputs.
    pub raw_dim: usize,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub pose_spacing: f64,
    pub pose_jitter: f64,
    pub aliasing_rate: f64,
    pub feature_shape: FeatureShape,
    pub noise_std: f64,
    /// Ground-truth distance threshold in scene units.
    pub threshold: f64,
    pub split: SplitFractions,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 32,
            images_per_class: 400,
            descriptor_dim: 64,
            raw_dim: 64,
            kappa_min: 5.0,
            kappa_max: 500.0,
            pose_spacing: 100.0,
            pose_jitter: 5.0,
            aliasing_rate: 0.25,
            feature_shape: FeatureShape {
                channels: 8,
                height: 4,
                width: 4,
            },
            noise_std: 0.1,
            threshold: DEFAULT_THRESHOLD,
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need ≥ 2 classes, got {}", self.num_classes));
        }
        if self.images_per_class == 0 {
            return bad("images_per_class must be ≥ 1".into());
        }
        if self.descriptor_dim < 2 || self.raw_dim == 0 {
            return bad("descriptor_dim must be ≥ 2 and raw_dim ≥ 1".into());
        }
        if !(self.kappa_min > 0.0 && self.kappa_min <= self.kappa_max && self.kappa_max.is_finite()) {
            return bad(format!(
                "need 0 < kappa_min ≤ kappa_max, got [{}, {}]",
                self.kappa_min, self.kappa_max
            ));
        }
        if !(self.pose_jitter >= 0.0 && self.pose_spacing > 2.0 * self.pose_jitter) {
            return bad(format!(
                "pose_spacing {} must exceed twice the jitter {}",
                self.pose_spacing, self.pose_jitter
            ));
        }
        if !(0.0..=1.0).contains(&self.aliasing_rate) {
            return bad(format!("aliasing_rate {} outside [0, 1]", self.aliasing_rate));
        }
        if self.feature_shape.channels < 1 || self.feature_shape.height * self.feature_shape.width < 1 {
            return bad("feature shape needs ≥ 1 channel and ≥ 1 position".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be ≥ 0".into());
        }
        if !(self.threshold > 0.0) {
            return bad("threshold must be > 0".into());
        }
        let f = self.split;
        if [f.train, f.database, f.query].iter().any(|v| !(*v >= 0.0)) || (f.train + f.database + f.query - 1.0).abs() > 1e-9 {
            return bad("split fractions must be ≥ 0 and sum to 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "db")]
    Database,
    #[serde(rename = "query")]
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SceneConfig,
    pub prototypes: PrototypeSet,
    pub class_poses: Vec<[f64; 2]>,
    /// All images; `true_kappa` is filled.
    pub bank: DescriptorBank,
    pub features: Vec<FeatureMap>,
    /// `N × raw_dim`, row-major.
    pub raw: Vec<f64>,
    /// `raw_dim × descriptor_dim` mixing matrix.
    pub mixing: Vec<f64>,
    pub ambiguity: Vec<f64>,
    pub splits: Vec<Split>,
    pub aliased_pairs: Vec<(usize, usize)>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    pub fn raw_row(&self, i: usize) -> &[f64] {
        let m = self.config.raw_dim;
        &self.raw[i * m..(i + 1) * m]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split_bank(&self, split: Split) -> DescriptorBank {
        self.bank.subset(&self.indices(split))
    }
}

/// Smooth monotone embedding of the ambiguity into channel 0.
pub fn ambiguity_embedding(a: f64) -> f64 {
    0.25 + 1.5 * a
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> UnitDescriptor {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if norm(&v) > 1e-6 {
            if let Ok(u) = UnitDescriptor::normalize(v) {
                return u;
            }
        }
    }
}

fn separated_prototypes(cfg: &SceneConfig) -> Result<PrototypeSet> {
    let mut rng = stream_rng(cfg.seed, STREAM_PROTOTYPES);
    let mut out: Vec<UnitDescriptor> = Vec::with_capacity(cfg.num_classes);
    for j in 0..cfg.num_classes {
        let mut attempts = 0;
        let w = loop {
            let w = random_unit(&mut rng, cfg.descriptor_dim);
            if out.iter().all(|o| o.cos(&w).abs() < PROTOTYPE_SEPARATION) {
                break w;
            }
            attempts += 1;
            if attempts >= PROTOTYPE_ATTEMPTS {
                return Err(Error::Config(format!(
                    "could not place prototype {j} with |cos| < {PROTOTYPE_SEPARATION} in d={}",
                    cfg.descriptor_dim
                )));
            }
        };
        out.push(w);
    }
    PrototypeSet::new(out)
}

struct Image {
    ambiguity: f64,
    kappa: f64,
    pose: [f64; 2],
    descriptor: UnitDescriptor,
    features: FeatureMap,
}

fn sample_image(cfg: &SceneConfig, index: usize, mu: &UnitDescriptor, center: [f64; 2]) -> Result<Image> {
    let mut rng = stream_rng(cfg.seed, STREAM_IMAGES + index as u64);
    let a: f64 = rng.random();
    let kappa = cfg.kappa_min + (cfg.kappa_max - cfg.kappa_min) * (1.0 - a);
    let j = cfg.pose_jitter;
    let pose = if j > 0.0 {
        [
            center[0] + rng.random_range(-j..=j),
            center[1] + rng.random_range(-j..=j),
        ]
    } else {
        center
    };
    let shape = cfg.feature_shape;
    let s = shape.height * shape.width;
    let mut values = vec![ambiguity_embedding(a); shape.channels * s];
    for v in values.iter_mut().skip(s) {
        let n: f64 = rng.sample(StandardNormal);
        *v = (0.5 + cfg.noise_std * n).abs();
    }
    let features = FeatureMap::new(shape.channels, shape.height, shape.width, values)?;
    // the descriptor comes last so that re-sampling it under a new mean
    // direction leaves ambiguity, pose and features unchanged
    let descriptor = sample_vmf_with(&VmfParams::new(mu.clone(), kappa)?, 1, &mut rng)?
        .pop()
        .expect("one sample");
    Ok(Image {
        ambiguity: a,
        kappa,
        pose,
        descriptor,
        features,
    })
}

/// Builds the scene and then injects aliasing at the configured rate.
pub fn generate_scene(config: &SceneConfig) -> Result<SynthDataset> {
    config.validate()?;
    let base = generate_clean(config)?;
    inject_aliasing(base, config.aliasing_rate, config.seed ^ 0x5eed_a11a5)
}

fn generate_clean(cfg: &SceneConfig) -> Result<SynthDataset> {
    let prototypes = separated_prototypes(cfg)?;
    let c = cfg.num_classes;
    let side = (c as f64).sqrt().ceil() as usize;
    let class_poses: Vec<[f64; 2]> = (0..c)
        .map(|j| [(j % side) as f64 * cfg.pose_spacing, (j / side) as f64 * cfg.pose_spacing])
        .collect();

    let mut mix_rng = stream_rng(cfg.seed, STREAM_MIXING);
    let scale = 1.0 / (cfg.descriptor_dim as f64).sqrt();
    let mixing: Vec<f64> = (0..cfg.raw_dim * cfg.descriptor_dim)
        .map(|_| mix_rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();

    let n = c * cfg.images_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / cfg.images_per_class).collect();
    let images: Vec<Image> = (0..n)
        .map(|i| sample_image(cfg, i, &prototypes.weights()[labels[i]], class_poses[labels[i]]))
        .collect::<Result<_>>()?;
    let splits = split_indices(&labels, c, cfg.split, cfg.seed)?;
    assemble(cfg.clone(), prototypes, class_poses, mixing, labels, images, splits, Vec::new())
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    config: SceneConfig,
    prototypes: PrototypeSet,
    class_poses: Vec<[f64; 2]>,
    mixing: Vec<f64>,
    labels: Vec<usize>,
    images: Vec<Image>,
    splits: Vec<Split>,
    aliased_pairs: Vec<(usize, usize)>,
) -> Result<SynthDataset> {
    let n = images.len();
    let descriptors: Vec<UnitDescriptor> = images.iter().map(|im| im.descriptor.clone()).collect();
    let bank = DescriptorBank::from_descriptors(
        &descriptors,
        (0..n as u64).collect(),
        labels,
        Some(images.iter().map(|im| im.pose).collect()),
    )?
    .with_true_kappa(images.iter().map(|im| im.kappa).collect())?;
    let raw: Vec<f64> = (0..n)
        .flat_map(|i| matvec(&mixing, config.raw_dim, bank.row(i)))
        .collect();
    Ok(SynthDataset {
        config,
        prototypes,
        class_poses,
        bank,
        ambiguity: images.iter().map(|im| im.ambiguity).collect(),
        features: images.into_iter().map(|im| im.features).collect(),
        raw,
        mixing,
        splits,
        aliased_pairs,
    })
}

/// Copies the prototype of one class onto a geographically distant class for
/// `round(rate·C)` classes (in pairs) and re-samples the second class's
/// descriptors around the shared direction.
pub fn inject_aliasing(dataset: SynthDataset, rate: f64, seed: u64) -> Result<SynthDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("aliasing rate {rate} outside [0, 1]")));
    }
    let c = dataset.prototypes.num_classes();
    let count = (rate * c as f64).round() as usize;
    if count == 0 {
        return Ok(dataset);
    }
    if count % 2 == 1 {
        return Err(Error::Config(format!(
            "aliasing rate {rate} selects {count} of {c} classes, which cannot be paired"
        )));
    }
    let tau = dataset.config.threshold;
    let mut rng = stream_rng(seed, STREAM_ALIASING);
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut rng);
    let chosen = &classes[..count];
    let mut pairs = Vec::with_capacity(count / 2);
    for p in chosen.chunks_exact(2) {
        let (a, b) = (p[0].min(p[1]), p[0].max(p[1]));
        let (pa, pb) = (dataset.class_poses[a], dataset.class_poses[b]);
        // nearest possible images of the two classes
        let gap = (pa[0] - pb[0]).hypot(pa[1] - pb[1]) - 2.0 * dataset.config.pose_jitter * 2f64.sqrt();
        if gap <= tau {
            return Err(Error::Config(format!(
                "classes {a} and {b} are too close to alias (gap {gap} ≤ τ={tau})"
            )));
        }
        pairs.push((a, b));
    }
    pairs.sort_unstable();

    let SynthDataset {
        config,
        prototypes,
        class_poses,
        bank,
        mixing,
        splits,
        mut aliased_pairs,
        ..
    } = dataset;
    let mut protos = prototypes.weights().to_vec();
    for &(a, b) in &pairs {
        protos[b] = protos[a].clone();
    }
    let prototypes = PrototypeSet::new(protos)?;
    let labels = bank.labels().to_vec();
    let images: Vec<Image> = (0..labels.len())
        .map(|i| sample_image(&config, i, &prototypes.weights()[labels[i]], class_poses[labels[i]]))
        .collect::<Result<_>>()?;
    aliased_pairs.extend(pairs);
    assemble(config, prototypes, class_poses, mixing, labels, images, splits, aliased_pairs)
}

/// Class-stratified split, deterministic per seed.
pub fn split_indices(
    labels: &[usize],
    num_classes: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<Split>> {
    let mut rng = stream_rng(seed, STREAM_SPLIT);
    let mut out = vec![Split::Train; labels.len()];
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = members.len();
        let n_train = (fractions.train * n as f64).round() as usize;
        let n_db = (fractions.database * n as f64).round() as usize;
        if n_db == 0 || n_train + n_db >= n {
            return Err(Error::Config(format!(
                "class {class} with {n} images is too small to stratify into train/db/query"
            )));
        }
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            out[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_db {
                Split::Database
            } else {
                Split::Query
            };
        }
    }
    Ok(out)
}

/// Re-splits an existing dataset.
pub fn split(dataset: &mut SynthDataset, fractions: SplitFractions, seed: u64) -> Result<()> {
    dataset.splits = split_indices(
        dataset.bank.labels(),
        dataset.prototypes.num_classes(),
        fractions,
        seed,
    )?;
    Ok(())
}
