//! Per-command settings: JSON file values first, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use mtu_core::datapipe::{AugmentConfig, CrrpConfig, NoiseSpec, TargetSpec};
use mtu_core::io::write_json;
use mtu_core::metrics::DEFAULT_D_THRESH;
use mtu_core::train::TrainConfig;
use mtu_core::{Error, ModelConfig, ModelVariant};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads `path` as a settings object; absent keys keep their defaults.
pub fn load<S: DeserializeOwned + Default>(path: Option<&Path>) -> Result<S> {
    let Some(path) = path else {
        return Ok(S::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    let settings = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    Ok(settings)
}

/// Writes the fully resolved settings next to the command's outputs.
pub fn echo<S: Serialize>(out: &Path, command: &str, settings: &S) -> Result<()> {
    let doc = serde_json::json!({ "command": command, "settings": settings });
    write_json(out.join("config.json"), &doc).context("writing config.json")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub count: usize,
    pub size: usize,
    pub targets: TargetSpec,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            count: 16,
            size: 64,
            targets: TargetSpec::default(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSettings {
    pub crrp: CrrpConfig,
    /// Flips and blur applied after the pastes.
    pub classic: Option<AugmentConfig>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSettings {
    pub tile_size: usize,
}

impl Default for TileSettings {
    fn default() -> Self {
        Self { tile_size: 1024 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub variant: ModelVariant,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSettings {
    /// Exact `f32` dumps instead of 16-bit PNG.
    pub raw: bool,
}

/// How a probability map becomes a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binarize {
    Fixed(f64),
    Adaptive,
}

impl Binarize {
    pub fn validate(self) -> Result<Self> {
        if let Binarize::Fixed(t) = self {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("tau must lie in [0, 1], got {t}")).into());
            }
        }
        Ok(self)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSettings {
    pub threshold: Binarize,
}

impl Default for ClusterSettings {
    /// Deep-model outputs are kept wherever the network fires at all.
    fn default() -> Self {
        Self {
            threshold: Binarize::Fixed(0.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Applied to probability maps; mask predictions are used as they are.
    pub threshold: Binarize,
    pub d_thresh: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: Binarize::Fixed(0.5),
            d_thresh: DEFAULT_D_THRESH,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RocSettings {
    /// Points in the evenly spaced threshold grid over `[0, 1]`.
    pub taus: usize,
    pub d_thresh: f64,
}

impl Default for RocSettings {
    fn default() -> Self {
        Self {
            taus: 101,
            d_thresh: DEFAULT_D_THRESH,
        }
    }
}
