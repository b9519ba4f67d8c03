//! JSON run configuration.
//!
//! ```json
//! {
//!   "architecture": { "d": 32, "heads": 4, "head_dim": 8, "layers": 2, "k_tokens": 8 },
//!   "variant": "full",
//!   "acoustic_patches": "temporal",
//!   "training": { "epochs": 200, "batch_size": 8, "threshold": 0.5,
//!                 "optimizer": { "lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8 } },
//!   "seed": 0,
//!   "dataset": "data/synth",
//!   "output": "runs/desk"
//! }
//! ```
//!
//! Every field is optional; omitted fields take the full-scale defaults of
//! [`RunConfig::default`]. Vocabulary, class count and patch geometry come
//! from the dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurization::{AcousticPatchMode, FbankConfig};
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::synth::SynthSpec;
use crate::train::TrainSettings;
use crate::variants::VariantRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub k_tokens: usize,
}

impl Default for Architecture {
    /// 768 wide, 12 heads of 64, 12 layers, `K = 256`.
    fn default() -> Self {
        Architecture {
            d: 768,
            heads: 12,
            head_dim: 64,
            layers: 12,
            k_tokens: 256,
        }
    }
}

impl Architecture {
    /// 32 wide, 4 heads of 8, 2 layers, `K = 8`.
    pub fn desk() -> Self {
        Architecture {
            d: 32,
            heads: 4,
            head_dim: 8,
            layers: 2,
            k_tokens: 8,
        }
    }
}

/// Input sizes a model must accept, usually read off a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub classes: usize,
    pub vocab: usize,
    pub text_len: usize,
    pub visual_tokens: usize,
    pub visual_patch_dim: usize,
    pub acoustic_tokens: usize,
    pub acoustic_patch_dim: usize,
}

impl DataShape {
    /// Shape of featurized samples generated from `spec`.
    pub fn from_synth(spec: &SynthSpec, mode: AcousticPatchMode) -> Result<Self> {
        spec.validate()?;
        let fbank = FbankConfig::default();
        let frames = fbank
            .frame_count(spec.samples(), spec.sample_rate)
            .ok_or_else(|| Error::validation("audio shorter than one analysis window"))?;
        let geometry = spec.geometry();
        let acoustic_tokens = mode.patch_count(fbank.n_mels, frames);
        if acoustic_tokens == 0 {
            return Err(Error::validation(format!(
                "{frames} frames give no {mode:?} acoustic patches"
            )));
        }
        Ok(DataShape {
            classes: spec.classes,
            vocab: spec.vocab,
            text_len: spec.text_len,
            visual_tokens: geometry.patch_count(),
            visual_patch_dim: geometry.patch_dim(),
            acoustic_tokens,
            acoustic_patch_dim: mode.patch_dim(fbank.n_mels),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: Architecture,
    pub variant: String,
    pub acoustic_patches: AcousticPatchMode,
    pub training: TrainSettings,
    pub seed: u64,
    pub dataset: PathBuf,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            architecture: Architecture::default(),
            variant: "full".into(),
            acoustic_patches: AcousticPatchMode::Temporal,
            training: TrainSettings::default(),
            seed: 0,
            dataset: PathBuf::from("data/synth"),
            output: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Desk-scale profile: [`Architecture::desk`], 200 epochs, learning rate 1e-3.
    pub fn desk() -> Self {
        RunConfig {
            architecture: Architecture::desk(),
            training: TrainSettings {
                epochs: 200,
                optimizer: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                ..TrainSettings::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        VariantRegistry::<f32>::with_builtins().get(&self.variant)?;
        self.training.validate()?;
        let a = self.architecture;
        if a.k_tokens == 0 {
            return Err(Error::validation("k_tokens must be positive"));
        }
        crate::encoder::TransformerConfig {
            d: a.d,
            heads: a.heads,
            head_dim: a.head_dim,
            layers: a.layers,
            max_tokens: 1,
        }
        .validate()
    }

    /// Full model configuration for data of the given shape.
    pub fn model_config(&self, shape: DataShape) -> Result<ModelConfig> {
        self.validate()?;
        let a = self.architecture;
        let config = ModelConfig {
            d: a.d,
            heads: a.heads,
            head_dim: a.head_dim,
            layers: a.layers,
            k_tokens: a.k_tokens,
            max_tokens: [shape.visual_tokens, shape.acoustic_tokens, shape.text_len, a.k_tokens]
                .into_iter()
                .max()
                .unwrap_or(1),
            classes: shape.classes,
            vocab: shape.vocab,
            text_max_len: shape.text_len,
            visual_patch_dim: shape.visual_patch_dim,
            acoustic_patch_dim: shape.acoustic_patch_dim,
        };
        config.validate()?;
        Ok(config)
    }
}
