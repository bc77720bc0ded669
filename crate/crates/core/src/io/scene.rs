//! A scene directory: `bank.kpb`, `manifest.json`, `features.kpf`,
//! `raw.kpf` and `scene.json` (generator config and latent structure).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bank::{decode_bank, encode_bank};
use super::manifest::Manifest;
use super::tensor::{encode_tensor, read_tensor, Tensor};
use super::{read_bytes, read_json, Staged};
use crate::anchoring::PrototypeSet;
use crate::error::{Error, Result};
use crate::head::FeatureMap;
use crate::retrieval::DescriptorBank;
use crate::synth::{SceneConfig, SynthDataset};

pub const BANK_FILE: &str = "bank.kpb";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FEATURES_FILE: &str = "features.kpf";
pub const RAW_FILE: &str = "raw.kpf";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    config: SceneConfig,
    prototypes: PrototypeSet,
    class_poses: Vec<[f64; 2]>,
    mixing: Vec<f64>,
    ambiguity: Vec<f64>,
    aliased_pairs: Vec<(usize, usize)>,
}

pub fn features_tensor(features: &[FeatureMap]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::Domain("no feature maps".into()))?
        .shape();
    let mut values = Vec::with_capacity(features.len() * first.len());
    for f in features {
        if f.shape() != first {
            return Err(Error::Shape("feature maps have mixed shapes".into()));
        }
        values.extend_from_slice(f.values());
    }
    Tensor::new(vec![features.len(), first.channels, first.height, first.width], values)
}

pub fn features_from_tensor(t: &Tensor) -> Result<Vec<FeatureMap>> {
    let [n, c, h, w] = t.shape[..] else {
        return Err(Error::Shape(format!("feature tensor must have rank 4, got {:?}", t.shape)));
    };
    let per = c * h * w;
    (0..n)
        .map(|i| FeatureMap::new(c, h, w, t.values[i * per..(i + 1) * per].to_vec()))
        .collect()
}

/// Stages every file of the scene under `dir`; nothing appears until the
/// caller commits.
pub fn stage_scene(staged: &mut Staged, dir: &Path, ds: &SynthDataset) -> Result<()> {
    let manifest = Manifest::from_bank(&ds.bank, ds.splits.clone(), ds.config.threshold);
    staged.write(dir.join(BANK_FILE), &encode_bank(ds.bank.dim(), ds.bank.descriptors())?)?;
    staged.write_json(dir.join(MANIFEST_FILE), &manifest)?;
    staged.write(dir.join(FEATURES_FILE), &encode_tensor(&features_tensor(&ds.features)?))?;
    let raw = Tensor::new(vec![ds.len(), ds.config.raw_dim], ds.raw.clone())?;
    staged.write(dir.join(RAW_FILE), &encode_tensor(&raw))?;
    let meta = SceneMeta {
        config: ds.config.clone(),
        prototypes: ds.prototypes.clone(),
        class_poses: ds.class_poses.clone(),
        mixing: ds.mixing.clone(),
        ambiguity: ds.ambiguity.clone(),
        aliased_pairs: ds.aliased_pairs.clone(),
    };
    staged.write_json(dir.join(SCENE_FILE), &meta)
}

pub fn save_scene(dir: impl AsRef<Path>, ds: &SynthDataset) -> Result<()> {
    let mut staged = Staged::new();
    stage_scene(&mut staged, dir.as_ref(), ds)?;
    staged.commit()
}

/// Loads a bank and its manifest from `dir`.
pub fn load_bank_dir(dir: impl AsRef<Path>) -> Result<(DescriptorBank, Manifest)> {
    let dir = dir.as_ref();
    let manifest: Manifest = read_json(dir.join(MANIFEST_FILE))?;
    let bank_path = dir.join(BANK_FILE);
    let (dim, rows) = decode_bank(&read_bytes(&bank_path)?, &bank_path.display().to_string())?;
    let bank = manifest.into_bank(dim, rows)?;
    Ok((bank, manifest))
}

pub fn load_features(dir: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    features_from_tensor(&read_tensor(dir.as_ref().join(FEATURES_FILE))?)
}

pub fn load_raw(dir: impl AsRef<Path>) -> Result<Tensor> {
    let t = read_tensor(dir.as_ref().join(RAW_FILE))?;
    if t.shape.len() != 2 {
        return Err(Error::Shape(format!("raw tensor must have rank 2, got {:?}", t.shape)));
    }
    Ok(t)
}

/// Reassembles a generated scene written by [`save_scene`].
pub fn load_scene(dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let dir: PathBuf = dir.as_ref().to_path_buf();
    let meta: SceneMeta = read_json(dir.join(SCENE_FILE))?;
    let (bank, manifest) = load_bank_dir(&dir)?;
    let features = load_features(&dir)?;
    let raw = load_raw(&dir)?;
    let n = bank.len();
    if features.len() != n || raw.shape[0] != n || meta.ambiguity.len() != n {
        return Err(Error::Shape("scene files disagree on the number of images".into()));
    }
    if raw.shape[1] != meta.config.raw_dim {
        return Err(Error::Shape("raw tensor width differs from scene config".into()));
    }
    Ok(SynthDataset {
        config: meta.config,
        prototypes: meta.prototypes,
        class_poses: meta.class_poses,
        bank,
        features,
        raw: raw.values,
        mixing: meta.mixing,
        ambiguity: meta.ambiguity,
        splits: manifest.split,
        aliased_pairs: meta.aliased_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::FeatureShape;
    use crate::synth::generate_scene;

    #[test]
    fn scene_round_trip_is_bit_identical() {
        let cfg = SceneConfig {
            num_classes: 4,
            images_per_class: 10,
            descriptor_dim: 8,
            raw_dim: 6,
            feature_shape: FeatureShape {
                channels: 3,
                height: 2,
                width: 2,
            },
            aliasing_rate: 0.5,
            seed: 3,
            ..SceneConfig::default()
        };
        let ds = generate_scene(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_scene(dir.path(), &ds).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back, ds);
        let first: Vec<Vec<u8>> = [BANK_FILE, MANIFEST_FILE, FEATURES_FILE, RAW_FILE, SCENE_FILE]
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();
        let dir2 = tempfile::tempdir().unwrap();
        save_scene(dir2.path(), &back).unwrap();
        for (f, bytes) in [BANK_FILE, MANIFEST_FILE, FEATURES_FILE, RAW_FILE, SCENE_FILE].iter().zip(&first) {
            assert_eq!(&std::fs::read(dir2.path().join(f)).unwrap(), bytes, "{f}");
        }
    }
}
