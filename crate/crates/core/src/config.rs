use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Architecture and ablation switches of the counting network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of foreground density levels `n`; the mask branch predicts `n + 1` classes.
    pub num_levels: usize,
    pub channels_per_level: Vec<usize>,
    pub input_channels: usize,
    pub stem_channels: usize,
    /// Hidden width of the decoupling head and of every density head.
    pub head_channels: usize,
    /// One backbone for both branches (feature interaction) or one per branch.
    pub shared_backbone: bool,
    /// Cross-scale fusion of the pyramid before the density heads.
    pub use_saff: bool,
    /// Fix every channel-wise fusion weight at 1 instead of learning it from 0.
    pub freeze_saff_w: bool,
    /// Differentiable soft masks, or detached argmax one-hot masks.
    pub use_soft_masks: bool,
    pub lambda_weight: f64,
    /// Pyramid level (0-based) consumed by each density head; `None` gives the
    /// densest head the highest-resolution level.
    pub head_levels: Option<Vec<usize>>,
    /// Factor applied to density targets before regression; counts are divided back.
    pub density_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_levels: 3,
            channels_per_level: vec![8, 16, 32],
            input_channels: 1,
            stem_channels: 8,
            head_channels: 16,
            shared_backbone: true,
            use_saff: true,
            freeze_saff_w: false,
            use_soft_masks: true,
            lambda_weight: 1.0,
            head_levels: None,
            density_scale: 1.0,
        }
    }
}

impl ModelConfig {
    /// Default widths for `num_levels` levels, doubling from 8 channels.
    pub fn with_levels(num_levels: usize) -> Self {
        Self { num_levels, channels_per_level: (0..num_levels).map(|i| 8 << i).collect(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(config("num_levels", "must be at least 1"));
        }
        if self.num_levels > 8 {
            return Err(config("num_levels", "at most 8 levels are supported"));
        }
        if self.channels_per_level.len() != self.num_levels {
            return Err(config(
                "channels_per_level",
                format!("expected {} entries, got {}", self.num_levels, self.channels_per_level.len()),
            ));
        }
        if self.channels_per_level.contains(&0) {
            return Err(config("channels_per_level", "every channel count must be positive"));
        }
        if self.input_channels == 0 || self.stem_channels == 0 || self.head_channels == 0 {
            return Err(config("input_channels/stem_channels/head_channels", "must be positive"));
        }
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return Err(config("lambda_weight", "must be non-negative and finite"));
        }
        if !(self.density_scale > 0.0 && self.density_scale.is_finite()) {
            return Err(config("density_scale", "must be positive and finite"));
        }
        if let Some(levels) = &self.head_levels {
            if levels.len() != self.num_levels {
                return Err(config("head_levels", format!("expected {} entries", self.num_levels)));
            }
            if levels.iter().any(|&l| l >= self.num_levels) {
                return Err(config("head_levels", "level index out of range"));
            }
        }
        Ok(())
    }

    /// Pyramid level (0-based) feeding density head `head` (0-based).
    pub fn head_level(&self, head: usize) -> usize {
        match &self.head_levels {
            Some(levels) => levels[head],
            None => self.num_levels - 1 - head,
        }
    }

    /// Inputs must be divisible by this in both dimensions.
    pub fn input_multiple(&self) -> usize {
        4 << (self.num_levels - 1)
    }

    pub fn head_levels_resolved(&self) -> Vec<usize> {
        (0..self.num_levels).map(|h| self.head_level(h)).collect()
    }
}
