//! Dataset manifest: scene file lists, split assignment, and the JSON
//! document tying them together.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Split ratios mirrored from the experiment protocol.
pub const ALLOWED_FRACTIONS: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub image: String,
    pub heights: String,
    pub semantics: String,
    pub instances: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub h_max: f64,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.scenes.iter().filter(|s| s.split == split).count()
    }

    /// The effective labeled share of the training scenes.
    pub fn labeled_fraction(&self) -> f64 {
        let labeled = self.count(Split::Labeled);
        let train = labeled + self.count(Split::Unlabeled);
        if train == 0 {
            0.0
        } else {
            labeled as f64 / train as f64
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.scenes.is_empty() {
            return Err(Error::data(format!("{}: manifest lists no scenes", path.display())));
        }
        Ok(manifest)
    }
}

/// Assigns 60/20/20 train/val/test splits and marks `labeled_fraction` of
/// the training scenes as labeled (at least one). Returns the assignment in
/// scene order plus a flag for the promoted-to-one case.
pub fn make_splits(
    scene_count: usize,
    labeled_fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<Split>, bool)> {
    if scene_count < 10 {
        return Err(Error::data(format!(
            "need at least 10 scenes to split, got {scene_count}"
        )));
    }
    if !ALLOWED_FRACTIONS.iter().any(|f| (f - labeled_fraction).abs() < 1e-12) {
        return Err(Error::config(format!(
            "labeled fraction {labeled_fraction} not in {ALLOWED_FRACTIONS:?}"
        )));
    }
    let mut order: Vec<usize> = (0..scene_count).collect();
    order.shuffle(rng);
    let train_n = (scene_count * 6) / 10;
    let val_n = (scene_count * 2) / 10;
    let mut labeled_n = ((train_n as f64) * labeled_fraction).floor() as usize;
    let mut promoted = false;
    if labeled_n == 0 {
        labeled_n = 1;
        promoted = true;
    }
    let mut splits = vec![Split::Test; scene_count];
    for (pos, idx) in order.into_iter().enumerate() {
        splits[idx] = if pos < labeled_n {
            Split::Labeled
        } else if pos < train_n {
            Split::Unlabeled
        } else if pos < train_n + val_n {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok((splits, promoted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_counts_match_the_documented_arithmetic() {
        let (splits, promoted) = make_splits(1000, 0.01, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let count = |s: Split| splits.iter().filter(|x| **x == s).count();
        assert_eq!(count(Split::Labeled), 6);
        assert_eq!(count(Split::Unlabeled), 594);
        assert_eq!(count(Split::Val), 200);
        assert_eq!(count(Split::Test), 200);
        assert!(!promoted);
    }

    #[test]
    fn full_supervision_marks_all_train_scenes_labeled() {
        let (splits, _) = make_splits(100, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let count = |s: Split| splits.iter().filter(|x| **x == s).count();
        assert_eq!(count(Split::Labeled), 60);
        assert_eq!(count(Split::Unlabeled), 0);
    }

    #[test]
    fn tiny_fraction_promotes_to_one_labeled_scene() {
        let (splits, promoted) = make_splits(100, 0.001, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(splits.iter().filter(|x| **x == Split::Labeled).count(), 1);
        assert!(promoted);
    }

    #[test]
    fn rejects_off_menu_fractions_and_tiny_sets() {
        assert!(make_splits(100, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(make_splits(9, 0.01, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn splits_are_exhaustive_and_deterministic() {
        let a = make_splits(50, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_splits(50, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.0, b.0);
        // every scene got exactly one split by construction; count them
        assert_eq!(a.0.len(), 50);
    }

    #[test]
    fn manifest_roundtrips_with_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let manifest = DatasetManifest {
            seed: 7,
            h_max: 100.0,
            scenes: vec![SceneEntry {
                image: "s0_image.tser".into(),
                heights: "s0_heights.tser".into(),
                semantics: "s0_semantics.tser".into(),
                instances: "s0_instances.tser".into(),
                split: Split::Labeled,
            }],
        };
        manifest.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(loaded.count(Split::Labeled), 1);
    }
}
