use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::FeatureConfig;
use super::container::Container;
use super::synth::{synth_clip, write_clip, Clip};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, derive_seed_str};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub clips: Vec<Clip>,
}

impl Dataset {
    /// SHA-256 over the split tag and every clip digest in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.split.as_str().as_bytes());
        for c in &self.clips {
            h.update(c.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Generates `n_clips` clips whose seeds derive from `(seed, split, index)`.
pub fn synth_dataset(cfg: &FeatureConfig, n_clips: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n_clips == 0 {
        return Err(Error::Config("a dataset needs at least one clip".into()));
    }
    cfg.validate()?;
    let split_seed = derive_seed_str(seed, split.as_str());
    let clips = (0..n_clips)
        .map(|i| synth_clip(cfg, derive_seed(split_seed, i as u64), format!("{}-{i:04}", split.as_str())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { split, seed, clips })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub digest: String,
}

/// Index of a dataset written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config: FeatureConfig,
    pub config_digest: String,
    pub code_version: String,
    pub splits: Vec<SplitDigest>,
    pub clips: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDigest {
    pub split: Split,
    pub count: usize,
    pub digest: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
    }

    /// Loads every clip of `split`, verifying digests.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Dataset> {
        let clips = self
            .clips
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let path = dir.join(&e.path);
                let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
                let digest = hex::encode(Sha256::digest(&bytes));
                if digest != e.digest {
                    return Err(Error::Data(format!("{}: digest mismatch", path.display())));
                }
                let clip = Clip::from_container(&Container::from_bytes(&bytes)?)?;
                clip.validate()?;
                Ok(clip)
            })
            .collect::<Result<Vec<_>>>()?;
        if clips.is_empty() {
            return Err(Error::Data(format!("split `{}` is empty", split.as_str())));
        }
        Ok(Dataset { split, seed: self.seed, clips })
    }
}

/// SHA-256 of a serializable config.
pub fn config_digest<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Writes the splits under `dir/clips/<split>/` plus `dir/manifest.json`.
/// Clip digests in the manifest are over the stored (`f32`-rounded) file bytes.
pub fn write_dataset(dir: &Path, cfg: &FeatureConfig, seed: u64, datasets: &[Dataset]) -> Result<Manifest> {
    let mut clips = Vec::new();
    let mut splits = Vec::new();
    for ds in datasets {
        let rel_dir = PathBuf::from("clips").join(ds.split.as_str());
        let abs_dir = dir.join(&rel_dir);
        std::fs::create_dir_all(&abs_dir).map_err(|e| Error::io(&abs_dir, e))?;
        for clip in &ds.clips {
            let rel = rel_dir.join(format!("{}.clip", clip.id));
            write_clip(clip, &dir.join(&rel))?;
            let bytes = clip.to_container().to_bytes();
            clips.push(ManifestEntry {
                id: clip.id.clone(),
                split: ds.split,
                path: rel,
                digest: hex::encode(Sha256::digest(&bytes)),
            });
        }
        splits.push(SplitDigest { split: ds.split, count: ds.len(), digest: ds.digest() });
    }
    let manifest = Manifest {
        version: 1,
        seed,
        config: *cfg,
        config_digest: config_digest(cfg),
        code_version: crate::CODE_VERSION.to_string(),
        splits,
        clips,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_rejected() {
        let err = synth_dataset(&FeatureConfig::desk(50), 0, 1, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn distinct_clips_and_stable_digest() {
        let cfg = FeatureConfig::desk(50);
        let ds = synth_dataset(&cfg, 16, 5, Split::Train).unwrap();
        assert_eq!(ds.len(), 16);
        for i in 0..16 {
            for j in i + 1..16 {
                let a = &ds.clips[i].speaker.va;
                let b = &ds.clips[j].speaker.va;
                let mse = a.sub(b).unwrap().data().iter().map(|v| v * v).sum::<f64>() / a.numel() as f64;
                assert!(mse > 0.0);
            }
            assert_eq!(ds.clips[i].id, format!("train-{i:04}"));
        }
        let again = synth_dataset(&cfg, 16, 5, Split::Train).unwrap();
        assert_eq!(ds.digest(), again.digest());
        let other_split = synth_dataset(&cfg, 16, 5, Split::Test).unwrap();
        assert_ne!(ds.clips[0].digest(), other_split.clips[0].digest());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FeatureConfig::desk(50);
        let train = synth_dataset(&cfg, 3, 1, Split::Train).unwrap();
        let test = synth_dataset(&cfg, 2, 1, Split::Test).unwrap();
        let m = write_dataset(dir.path(), &cfg, 1, &[train, test]).unwrap();
        assert_eq!(m.clips.len(), 5);
        let back = Manifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        let loaded = back.load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(back.load_split(dir.path(), Split::Val).is_err());
    }
}
