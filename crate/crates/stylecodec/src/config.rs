//! Run configuration: one TOML file covering dataset, model, training,
//! eval, and ablation settings. Missing fields take defaults, flags
//! override file values, and every command persists the fully resolved
//! config beside its outputs.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::corpus::DatasetConfig;
use crate::eval::AblationCell;
use crate::model::ModelConfig;
use crate::par::ExecMode;
use crate::style_mdn::NoiseMode;
use crate::training::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub seed: u64,
    pub n: usize,
    pub m2m_samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { seed: 99, n: 1100, m2m_samples: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub k_values: Vec<usize>,
    pub include_mode_grid: bool,
    pub total_steps: u64,
    pub batch_frames: usize,
    pub m2m_samples: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            k_values: vec![3, 5, 7],
            include_mode_grid: true,
            total_steps: 150,
            batch_frames: 256,
            m2m_samples: 15,
        }
    }
}

impl AblationSettings {
    pub fn grid(&self) -> Vec<AblationCell> {
        let mut cells: Vec<AblationCell> = self
            .k_values
            .iter()
            .map(|&k| AblationCell { components: k, mode: NoiseMode::IsotropicAcrossClusters })
            .collect();
        if self.include_mode_grid {
            for mode in NoiseMode::ALL {
                let cell = AblationCell { components: 5, mode };
                if !cells.iter().any(|c| c.components == cell.components && c.mode == cell.mode) {
                    cells.push(cell);
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub parallel: bool,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            parallel: true,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            eval: EvalSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

impl RunConfig {
    /// Sized for a single desktop CPU core: narrower model, fewer decoder
    /// blocks, small frame budget. Dataset scale and thresholds are
    /// unchanged.
    pub fn desk_test() -> Self {
        let mut cfg = RunConfig::default();
        // enough speakers that unseen-speaker timbres stay in the span of
        // the trained fusion maps
        cfg.dataset.n_speakers = 48;
        cfg.dataset.heldout_speakers = 6;
        cfg.model.d_hidden = 64;
        cfg.model.decoder_blocks = 3;
        cfg.model.fusion.d_fusion = 48;
        cfg.training.batch_frames = 384;
        cfg.training.total_steps = 3000;
        cfg.training.warmup_steps = 200;
        cfg.training.peak_lr = 2e-3;
        cfg.training.fusion_steps = 800;
        cfg.eval.n = 250;
        cfg.resolve().expect("desk config is valid");
        cfg
    }

    /// Copy dataset-derived dimensions into the model config and validate.
    pub fn resolve(&mut self) -> Result<()> {
        anyhow::ensure!(
            self.schema_version == CONFIG_SCHEMA_VERSION,
            "config schema {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
            self.schema_version
        );
        self.model.layout = self.dataset.layout;
        self.model.text_vocab = self.dataset.text_vocab;
        self.model.emotion_count = self.dataset.emotion_count;
        self.model.d_style = self.dataset.d_style;
        self.model.fusion.d_timbre = self.dataset.d_timbre;
        self.dataset.validate()?;
        anyhow::ensure!(self.model.components >= 1, "need at least one mixture component");
        anyhow::ensure!(self.training.total_steps >= 1, "need at least one training step");
        Ok(())
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parse config {}", path.display()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serialize config")?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = RunConfig::default();
        cfg.training.total_steps = 123;
        cfg.model.components = 7;
        cfg.resolve().unwrap();
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.toml");
        std::fs::write(&path, "[training]\ntotal_steps = 42\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.training.total_steps, 42);
        assert_eq!(cfg.training.peak_lr, 5e-4);
        assert_eq!(cfg.model.components, 5);
    }

    #[test]
    fn resolve_syncs_model_with_dataset() {
        let mut cfg = RunConfig::default();
        cfg.dataset.d_style = 20;
        cfg.resolve().unwrap();
        assert_eq!(cfg.model.d_style, 20);
    }

    #[test]
    fn bad_schema_version_is_an_error() {
        let mut cfg = RunConfig { schema_version: 999, ..RunConfig::default() };
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn ablation_grid_matches_settings() {
        let grid = AblationSettings::default().grid();
        assert_eq!(grid.len(), 6);
        let k_only = AblationSettings { include_mode_grid: false, ..Default::default() }.grid();
        assert_eq!(k_only.len(), 3);
    }
}
