//! Dataset manifests: JSON index of rendered clips with content digests and
//! train/val/test split tags. Digests and split disjointness are verified on
//! load.

use crate::clipio::{atomic_write, load_clip, save_clip};
use crate::error::{Error, Result};
use crate::synthetic::{gen_synthetic, sample_spec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipRecord {
    /// Path relative to the manifest directory.
    pub path: String,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Seed the clip's spec was sampled with.
    pub seed: u64,
    /// SHA-256 of the rendering spec (JSON).
    pub spec_digest: String,
    /// SHA-256 of the clip file.
    pub file_digest: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ClipRecord>,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl DatasetManifest {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        atomic_write(&Self::manifest_path(dir), &json)
    }

    /// Loads the manifest, checking split disjointness and every clip file's
    /// digest.
    pub fn load_verified(dir: &Path) -> Result<Self> {
        let bytes = std::fs::read(Self::manifest_path(dir))?;
        let manifest: Self = serde_json::from_slice(&bytes)?;
        manifest.verify(dir)?;
        Ok(manifest)
    }

    pub fn verify(&self, dir: &Path) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for record in &self.records {
            if !seen.insert(record.path.as_str()) {
                return Err(Error::Dataset(format!(
                    "clip {} appears more than once (splits must be disjoint)",
                    record.path
                )));
            }
            let file = dir.join(&record.path);
            let bytes = std::fs::read(&file)
                .map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
            let digest = hex_digest(&bytes);
            if digest != record.file_digest {
                return Err(Error::Dataset(format!(
                    "digest mismatch for {}: stored {} vs computed {digest}",
                    record.path, record.file_digest
                )));
            }
        }
        Ok(())
    }

    pub fn split_paths(&self, split: Split) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.path.clone())
            .collect()
    }

    /// Loads every clip of one split.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<crate::clip::VideoClip>> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| load_clip(&dir.join(&r.path)))
            .collect()
    }
}

/// Renders a synthetic dataset into `dir` and writes its manifest: sprite
/// clips of shape `(t, h, w, c)` split into train/val/test counts.
pub fn generate_dataset(
    dir: &Path,
    h: usize,
    w: usize,
    c: usize,
    t: usize,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let splits = [
        (Split::Train, counts.0, "train"),
        (Split::Val, counts.1, "val"),
        (Split::Test, counts.2, "test"),
    ];
    for (split, count, tag) in splits {
        for i in 0..count {
            let spec = sample_spec(h, w, c, t, &mut rng);
            let (clip, _) = gen_synthetic(&spec)?;
            let rel = format!("{tag}_{i:05}.vclp");
            let path = dir.join(&rel);
            save_clip(&clip, &path)?;
            let file_digest = hex_digest(&std::fs::read(&path)?);
            let spec_digest = hex_digest(&serde_json::to_vec(&spec)?);
            records.push(ClipRecord {
                path: rel,
                t,
                h,
                w,
                c,
                seed: spec.seed,
                spec_digest,
                file_digest,
                split,
            });
        }
    }
    let manifest = DatasetManifest { records };
    manifest.save(dir)?;
    Ok(manifest)
}
