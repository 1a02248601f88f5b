//! The pipeline configuration file: model, training, sampling, and inference
//! sections, all optional with the standard defaults.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use icewater::infer::{InferenceMode, DEFAULT_OVERLAP, DEFAULT_TILE};
use icewater::model::ModelSpec;
use icewater::sampler::{DEFAULT_PATCHES_PER_REGION, DEFAULT_PATCH_SIZE};
use icewater::scene::ValidationHalf;
use icewater::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub inference: InferenceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub patch_size: usize,
    pub patches_per_region: usize,
    pub validation_half: ValidationHalf,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            patches_per_region: DEFAULT_PATCHES_PER_REGION,
            validation_half: ValidationHalf::South,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSection {
    /// "single_pass" or "tiled".
    pub mode: String,
    pub tile: usize,
    pub overlap: usize,
    pub single_pass_cap_gib: u64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            mode: "single_pass".into(),
            tile: DEFAULT_TILE,
            overlap: DEFAULT_OVERLAP,
            single_pass_cap_gib: 8,
        }
    }
}

impl InferenceSection {
    pub fn mode(&self) -> anyhow::Result<InferenceMode> {
        match self.mode.as_str() {
            "single_pass" => Ok(InferenceMode::SinglePass),
            "tiled" => Ok(InferenceMode::Tiled {
                tile: self.tile,
                overlap: self.overlap,
            }),
            other => anyhow::bail!("unknown inference mode {other:?} (single_pass | tiled)"),
        }
    }

    pub fn cap_bytes(&self) -> u64 {
        self.single_pass_cap_gib << 30
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(PipelineConfig::default()),
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing config {}", path.display()))?;
        Ok(())
    }

    /// Stable digest of the experiment-defining parts (model + train), used
    /// by the report's apples-to-apples guard.
    pub fn experiment_digest(&self) -> anyhow::Result<String> {
        let canonical = serde_json::to_vec(&(&self.model, &self.train))?;
        Ok(crate::manifest::sha256_hex(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.initial_lr, 1e-5);
        assert_eq!(cfg.train.plateau_patience, 5);
        assert_eq!(cfg.train.min_lr, 1e-8);
        assert_eq!(cfg.train.early_stop_patience, 20);
        assert_eq!(cfg.sampler.patch_size, 1000);
        assert_eq!(cfg.sampler.patches_per_region, 100);
        assert_eq!(cfg.model.aspp_rates, vec![6, 12, 18]);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = PipelineConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // A partial file only overrides what it names.
        let partial: PipelineConfig =
            toml::from_str("[train]\nbatch_size = 4\n[sampler]\npatch_size = 64\n").unwrap();
        assert_eq!(partial.train.batch_size, 4);
        assert_eq!(partial.train.initial_lr, 1e-5);
        assert_eq!(partial.sampler.patch_size, 64);
    }

    #[test]
    fn shipped_default_config_matches_builtin_defaults() {
        let path =
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml");
        let from_file = PipelineConfig::load(&path).unwrap();
        assert_eq!(from_file, PipelineConfig::default());
    }

    #[test]
    fn digest_tracks_experiment_fields_only() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        b.inference.tile = 512;
        assert_eq!(
            a.experiment_digest().unwrap(),
            b.experiment_digest().unwrap()
        );
        let mut c = PipelineConfig::default();
        c.train.batch_size = 16;
        assert_ne!(
            a.experiment_digest().unwrap(),
            c.experiment_digest().unwrap()
        );
    }
}
