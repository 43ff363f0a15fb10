//! Small multi-resolution feature extractor producing the `n`-level pyramid.
//!
//! A two-convolution stride-2 stem brings the input to `H/4 x W/4`. Level 1
//! refines that with two 3x3 blocks; every further level starts with a
//! stride-2 transition from the previous level, followed by two 3x3 blocks.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::layers::ConvBlock;
use crate::params::ParamStore;

/// Graph handles of the `n` pyramid levels, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
struct LevelBranch {
    transition: Option<ConvBlock>,
    blocks: [ConvBlock; 2],
}

#[derive(Clone, Debug)]
pub struct Backbone {
    prefix: &'static str,
    stem: [ConvBlock; 2],
    levels: Vec<LevelBranch>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &'static str, config: &ModelConfig) -> Self {
        let s = config.stem_channels;
        let stem = [
            ConvBlock::new(store, rng, &format!("{prefix}.stem.0"), config.input_channels, s, 3, 2),
            ConvBlock::new(store, rng, &format!("{prefix}.stem.1"), s, s, 3, 2),
        ];
        let mut levels = Vec::with_capacity(config.num_levels);
        let mut prev = s;
        for (i, &c) in config.channels_per_level.iter().enumerate() {
            let name = format!("{prefix}.level{i}");
            let transition = (i > 0).then(|| ConvBlock::new(store, rng, &format!("{name}.transition"), prev, c, 3, 2));
            let cin = if i == 0 { prev } else { c };
            let blocks = [
                ConvBlock::new(store, rng, &format!("{name}.block0"), cin, c, 3, 1),
                ConvBlock::new(store, rng, &format!("{name}.block1"), c, c, 3, 1),
            ];
            levels.push(LevelBranch { transition, blocks });
            prev = c;
        }
        Self { prefix, stem, levels }
    }

    pub fn prefix(&self) -> &'static str {
        self.prefix
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Runs the backbone on an `(N, C_in, H, W)` input whose sides are
    /// multiples of `4 * 2^(n-1)`.
    pub fn extract_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        mode: Mode,
    ) -> Result<FeaturePyramid> {
        let s = g.shape(image);
        let multiple = 4 << (self.levels.len() - 1);
        if !s.h.is_multiple_of(multiple) || !s.w.is_multiple_of(multiple) || s.h == 0 || s.w == 0 {
            return Err(Error::Padding { height: s.h, width: s.w, divisor: multiple });
        }
        let mut x = image;
        for b in &self.stem {
            x = b.forward(g, store, x, mode);
        }
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            if let Some(t) = &level.transition {
                x = t.forward(g, store, x, mode);
            }
            for b in &level.blocks {
                x = b.forward(g, store, x, mode);
            }
            out.push(x);
        }
        Ok(FeaturePyramid { levels: out })
    }
}

/// Two backbones with identical architecture and independently drawn weights,
/// one per branch, which disables feature sharing.
pub fn clone_unshared(store: &mut ParamStore, rng: &mut impl Rng, config: &ModelConfig) -> (Backbone, Backbone) {
    let a = Backbone::new(store, rng, "backbone", config);
    let b = Backbone::new(store, rng, "backbone_ddm", config);
    (a, b)
}
