use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Network hyperparameters. Per-level vectors are indexed from the
/// highest-resolution level (1/4 of the input) downwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub channels: Vec<usize>,
    /// `depths[l][k]`: blocks of level `l` in the `k`-th stage where it is active.
    pub depths: Vec<Vec<usize>>,
    pub heads: Vec<usize>,
    /// Token-count divisor of the attention keys/values; must be a square.
    pub gamma: Vec<usize>,
    /// Mix-FFN hidden width multiplier.
    pub expansion: Vec<usize>,
    pub num_keypoints: usize,
    /// `[height, width]` of the network input.
    pub input_size: [usize; 2],
}

pub const LN_EPS: f64 = 1e-6;
/// Input pixels per heatmap cell.
pub const OUTPUT_STRIDE: usize = 4;

impl ModelConfig {
    pub fn aggpose_l(num_keypoints: usize) -> Self {
        ModelConfig {
            variant: "aggpose-l".into(),
            channels: vec![64, 128, 320, 512],
            depths: vec![vec![3, 3, 3, 3], vec![6, 3, 3], vec![40, 3], vec![3]],
            heads: vec![1, 2, 5, 8],
            gamma: vec![64, 16, 4, 1],
            expansion: vec![4; 4],
            num_keypoints,
            input_size: [256, 192],
        }
    }

    pub fn aggpose_s(num_keypoints: usize) -> Self {
        ModelConfig {
            variant: "aggpose-s".into(),
            channels: vec![32, 64, 160, 256],
            depths: vec![vec![3, 3, 3, 3], vec![4, 3, 3], vec![6, 3], vec![3]],
            heads: vec![1, 2, 5, 8],
            gamma: vec![64, 16, 4, 1],
            expansion: vec![4; 4],
            num_keypoints,
            input_size: [256, 192],
        }
    }

    /// Two-level toy network for desk-scale experiments.
    pub fn aggpose_t(num_keypoints: usize) -> Self {
        ModelConfig {
            variant: "aggpose-t".into(),
            channels: vec![8, 16],
            depths: vec![vec![1, 1], vec![1]],
            heads: vec![1, 2],
            gamma: vec![4, 1],
            expansion: vec![4, 4],
            num_keypoints,
            input_size: [64, 48],
        }
    }

    /// Smallest network exercising every component; used for exhaustive gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            variant: "micro".into(),
            channels: vec![4, 8],
            depths: vec![vec![1, 1], vec![1]],
            heads: vec![1, 1],
            gamma: vec![4, 1],
            expansion: vec![2, 2],
            num_keypoints: 3,
            input_size: [32, 32],
        }
    }

    pub fn preset(name: &str, num_keypoints: usize) -> Option<Self> {
        match name {
            "aggpose-l" | "l" => Some(Self::aggpose_l(num_keypoints)),
            "aggpose-s" | "s" => Some(Self::aggpose_s(num_keypoints)),
            "aggpose-t" | "t" => Some(Self::aggpose_t(num_keypoints)),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.channels.len()
    }

    /// Token grid `(H, W)` of level `l` (0-based).
    pub fn level_grid(&self, l: usize) -> (usize, usize) {
        let f = OUTPUT_STRIDE << l;
        (self.input_size[0] / f, self.input_size[1] / f)
    }

    pub fn heatmap_size(&self) -> (usize, usize) {
        self.level_grid(0)
    }

    /// Side length `r` of the key/value reduction tiles of level `l`.
    pub fn reduction_side(&self, l: usize) -> usize {
        (self.gamma[l] as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("{}: {m}", self.variant)));
        let l = self.num_levels();
        if l == 0 {
            return bad("at least one level required".into());
        }
        for (name, len) in [
            ("depths", self.depths.len()),
            ("heads", self.heads.len()),
            ("gamma", self.gamma.len()),
            ("expansion", self.expansion.len()),
        ] {
            if len != l {
                return bad(format!("{name} has {len} entries for {l} levels"));
            }
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return bad(format!("channels {:?} must be positive and strictly increasing", self.channels));
        }
        if self.num_keypoints == 0 {
            return bad("num_keypoints must be positive".into());
        }
        let div = OUTPUT_STRIDE << (l - 1);
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return bad(format!("input {h}x{w} must be divisible by {div}"));
        }
        for lv in 0..l {
            if self.depths[lv].len() != l - lv {
                return bad(format!(
                    "level {} is active in {} stages but has {} depths",
                    lv + 1,
                    l - lv,
                    self.depths[lv].len()
                ));
            }
            if self.depths[lv].contains(&0) {
                return bad(format!("level {} has a zero depth", lv + 1));
            }
            let (c, heads) = (self.channels[lv], self.heads[lv]);
            if heads == 0 || c % heads != 0 {
                return bad(format!("level {}: {c} channels not divisible by {heads} heads", lv + 1));
            }
            let r = self.reduction_side(lv);
            if self.gamma[lv] == 0 || r * r != self.gamma[lv] {
                return bad(format!("level {}: gamma {} is not a square", lv + 1, self.gamma[lv]));
            }
            let (gh, gw) = self.level_grid(lv);
            if gh % r != 0 || gw % r != 0 {
                return bad(format!("level {}: grid {gh}x{gw} not divisible by {r}", lv + 1));
            }
            if self.expansion[lv] == 0 {
                return bad(format!("level {}: expansion must be positive", lv + 1));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
