//! TOML configuration files tying the whole pipeline together.
//!
//! Sections mirror the training-settings table layout: `[vqvae]` holds clip
//! shape, downsample factors, codebook and thresholds; `[vqvae_train]` the
//! stage-one optimizer settings; `[transformer]` the stage-two architecture;
//! `[transformer_train]` its optimizer settings; `[generation]` the
//! iterative-decoding knobs.

use crate::error::Result;
use crate::tokengen::model::TokenModelConfig;
use crate::tokengen::{MaskSchedule, ScheduleShape, Stage2TrainConfig};
use crate::vqvae::VqvaeConfig;
use crate::vqvae_train::VqvaeTrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Stage-two architecture section (grids and vocabulary are derived from the
/// `[vqvae]` section, not repeated here).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerSection {
    pub so_blocks: usize,
    pub m_blocks: usize,
    pub attention_heads: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub dropout: f64,
    #[serde(default)]
    pub unconditional: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSection {
    /// Iterations of the masked decoding loop.
    pub s: usize,
    pub temperature: f64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self { s: 16, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileConfig {
    pub vqvae: VqvaeConfig,
    #[serde(default)]
    pub vqvae_train: VqvaeTrainConfig,
    pub transformer: TransformerSection,
    #[serde(default)]
    pub transformer_train: Stage2TrainConfig,
    #[serde(default)]
    pub generation: GenerationSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: FileConfig = toml::from_str(&text)?;
        cfg.vqvae.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        crate::clipio::atomic_write(path, text.as_bytes())
    }

    /// Stage-two model config derived from the tokenizer section.
    pub fn token_model_config(&self) -> TokenModelConfig {
        TokenModelConfig {
            vocab: self.vqvae.n,
            t: self.vqvae.t,
            scene_grid: self.vqvae.scene_grid(),
            object_grid: self.vqvae.object_grid(),
            motion_grid: self.vqvae.motion_grid(),
            embed_dim: self.transformer.embedding_dim,
            hidden_dim: self.transformer.hidden_dim,
            intermediate_dim: self.transformer.intermediate_dim,
            so_blocks: self.transformer.so_blocks,
            m_blocks: self.transformer.m_blocks,
            heads: self.transformer.attention_heads,
            dropout: self.transformer.dropout,
            unconditional: self.transformer.unconditional,
        }
    }

    pub fn mask_schedule(&self) -> MaskSchedule {
        MaskSchedule { shape: ScheduleShape::Cosine, s: self.generation.s }
    }
}

/// Root directory for datasets and checkpoints; overridable through the
/// `VIDTOK_DATA_ROOT` environment variable.
pub fn data_root() -> PathBuf {
    std::env::var_os("VIDTOK_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}
