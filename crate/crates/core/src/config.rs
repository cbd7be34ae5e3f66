//! Run configuration: one JSON document, every field defaulted, unknown keys
//! rejected. Command-line overrides patch the JSON by dotted key before
//! deserialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentRanges;
use crate::bins::BinStrategy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub scenes: usize,
    pub size: usize,
    pub seed: u64,
    pub buildings_min: usize,
    pub buildings_max: usize,
    pub trees_min: usize,
    pub trees_max: usize,
    pub h_max: f64,
    pub noise_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            scenes: 1000,
            size: 64,
            seed: 7,
            buildings_min: 2,
            buildings_max: 6,
            trees_min: 3,
            trees_max: 10,
            h_max: 100.0,
            noise_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitsConfig {
    pub labeled_fraction: f64,
}

impl Default for SplitsConfig {
    fn default() -> Self {
        SplitsConfig {
            labeled_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinsConfig {
    pub strategy: BinStrategy,
    pub num_classes: usize,
}

impl Default for BinsConfig {
    fn default() -> Self {
        BinsConfig {
            strategy: BinStrategy::Hbc,
            num_classes: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    pub ema_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64],
            ema_alpha: 0.99,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// Ranking-threshold decay; `None` resolves to `0.5^(2/epochs)` so the
    /// floor is reached halfway through training.
    pub threshold_lambda: Option<f64>,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub pl_list_size: usize,
    /// Steps per epoch; 0 means one pass over the labeled batches.
    pub steps_per_epoch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 60,
            threshold_lambda: None,
            batch_labeled: 4,
            batch_unlabeled: 4,
            pl_list_size: 256,
            steps_per_epoch: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn resolved_lambda(&self) -> f64 {
        self.threshold_lambda
            .unwrap_or_else(|| 0.5f64.powf(2.0 / self.epochs.max(1) as f64))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    /// One of: supervised | reg.-reg. | regcls.-regcls. | regcls.-cls. |
    /// regcls.-reg. | regcls.-reg.(TSE) | tse (alias for the last).
    pub name: String,
    pub pl: bool,
    pub ranking: bool,
    pub dynamic_threshold: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            name: "tse".to_string(),
            pl: true,
            ranking: true,
            dynamic_threshold: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub pl: f64,
    pub sup_s: f64,
    pub unlabeled: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            reg: 1.0,
            pl: 1.0,
            sup_s: 1.0,
            unlabeled: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub bucket_width: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { bucket_width: 10.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset_dir: String,
    pub output_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Number of repeated runs; metrics are averaged across them.
    pub seeds: usize,
    pub generator: GeneratorConfig,
    pub splits: SplitsConfig,
    pub bins: BinsConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub variant: VariantConfig,
    pub loss_weights: LossWeights,
    pub augment: AugmentRanges,
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(json: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(json.clone())
            .map_err(|e| Error::config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path)?;
        let value: serde_json::Value =
            serde_json::from_slice(&raw).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_json(&value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// The effective base seed: the config seed plus the repeat index.
    pub fn run_seed(&self, repeat: usize) -> u64 {
        self.seed.wrapping_add(repeat as u64)
    }
}

/// Applies a `dotted.key=value` override onto a JSON document. Values parse
/// as JSON when possible and fall back to strings.
pub fn apply_override(doc: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::config(format!(
                "override {key}: {} is not an object",
                parts[..i].join(".")
            )));
        }
        let map = node.as_object_mut().unwrap();
        if i == parts.len() - 1 {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Stable per-role seed derivation (FNV-1a over the tag, mixed with the
/// base seed).
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ base.wrapping_mul(0x9e3779b97f4a7c15)
}
