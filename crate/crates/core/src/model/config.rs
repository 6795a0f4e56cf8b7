use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the SwinUNETR-style network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Per-axis stride (and kernel) of the patch embedding.
    pub embed_patch: usize,
    /// Channel count of the first stage; stage `s` has `feature_size * 2^s`.
    pub feature_size: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Per-axis attention window.
    pub window: usize,
    pub mlp_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            out_channels: 1,
            embed_patch: 2,
            feature_size: 48,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![3, 6, 12, 24],
            window: 7,
            mlp_ratio: 4.0,
        }
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const LEAKY_SLOPE: f64 = 0.01;

impl ModelConfig {
    /// The reduced preset used for CPU-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            feature_size: 12,
            window: 4,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.feature_size << stage
    }

    /// Every spatial input dimension is padded up to a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        self.embed_patch << self.num_stages()
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        (self.stage_channels(stage) as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.embed_patch == 0 || self.feature_size == 0 || self.window == 0 {
            return fail("embed_patch, feature_size and window must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return fail(format!(
                "depths {:?} and num_heads {:?} must be non-empty and equally long",
                self.depths, self.num_heads
            ));
        }
        if self.depths.iter().chain(&self.num_heads).any(|&v| v == 0) {
            return fail("depths and num_heads entries must be >= 1".into());
        }
        for (s, &h) in self.num_heads.iter().enumerate() {
            let c = self.stage_channels(s);
            if c % h != 0 {
                return fail(format!(
                    "stage {s}: {c} channels not divisible by {h} heads"
                ));
            }
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden(0) == 0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        Ok(())
    }
}
