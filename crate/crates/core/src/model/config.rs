use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the network. Fully determines every parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of down-sampling levels.
    pub k: usize,
    /// Channel widths `C_1..C_k` of the encoder levels.
    pub channels: Vec<usize>,
    /// Width `C_0` of the full-resolution stem feature.
    pub stem_channels: usize,
    /// Attention heads for the transformer branch at levels `1..k-1`.
    pub heads_per_level: Vec<usize>,
    /// Side length of the square training patch.
    pub input_size: usize,
    /// MLP hidden width as a multiple of the token dimension.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mlp_ratio() -> usize {
    2
}

impl Default for ModelConfig {
    /// Four levels, as in the full-size network, at a desk-friendly width.
    fn default() -> Self {
        Self {
            k: 4,
            channels: vec![8, 16, 32, 64],
            stem_channels: 8,
            heads_per_level: vec![4, 4, 4],
            input_size: 64,
            mlp_ratio: default_mlp_ratio(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.channels.len() != self.k {
            return bad(format!("expected {} channel widths, got {}", self.k, self.channels.len()));
        }
        if self.channels.contains(&0) || self.stem_channels == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("channels must be strictly increasing: {:?}", self.channels));
        }
        if self.heads_per_level.len() != self.k - 1 {
            return bad(format!(
                "expected {} head counts (levels 1..k-1), got {}",
                self.k - 1,
                self.heads_per_level.len()
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        let stride = 1usize << self.k;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return bad(format!(
                "input_size {} is not divisible by 2^k = {stride}",
                self.input_size
            ));
        }
        for level in 1..self.k {
            let dim = self.token_dim(level);
            let heads = self.heads_per_level[level - 1];
            if heads == 0 || dim % heads != 0 {
                return bad(format!(
                    "level {level}: {heads} heads do not divide token dimension {dim}"
                ));
            }
        }
        Ok(())
    }

    /// `C_i`, with `C_0` the stem width.
    pub fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.stem_channels
        } else {
            self.channels[level - 1]
        }
    }

    /// `H_i = W_i`.
    pub fn spatial(&self, level: usize) -> usize {
        self.input_size >> level
    }

    /// Transformer patch side `P_i = H_k`, shared by every level.
    pub fn patch(&self) -> usize {
        self.spatial(self.k)
    }

    /// Token count `N_i = H_i·W_i / P_i²`.
    pub fn tokens(&self, level: usize) -> usize {
        let side = self.spatial(level) / self.patch();
        side * side
    }

    /// Token dimension `P_i²·C_i`.
    pub fn token_dim(&self, level: usize) -> usize {
        self.patch() * self.patch() * self.width(level)
    }
}
