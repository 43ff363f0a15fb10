//! Scale-adaptive feature fusion.
//!
//! Every level `i` receives, from every other level `k`, the resampled source
//! `F_ik(X_k)` scaled channel-wise by a learnable vector `w_ik`:
//!
//! ```text
//! X̂_i = X_i + sum_{k != i} P_ik(w_ik ⊙ F_ik(X_k))
//! ```
//!
//! `F_ik` is a chain of {1x1 block, bilinear 2x upsample} stages when the
//! source is coarser and a chain of stride-2 3x3 blocks when it is finer; it
//! keeps the source width `C_k`. `P_ik` is a bias-free 1x1 projection to `C_i`
//! channels, initialized to the identity when the widths already agree, so the
//! whole cross term stays linear in `w_ik`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::{config, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::layers::{Conv, ConvBlock};
use crate::params::{channel_vector, identity_kernel, ParamId, ParamKind, ParamStore};

#[derive(Clone, Debug)]
enum Stage {
    /// 1x1 block followed by bilinear 2x upsampling.
    Up(ConvBlock),
    /// Stride-2 3x3 block.
    Down(ConvBlock),
}

#[derive(Clone, Debug)]
pub struct CrossTerm {
    pub target: usize,
    pub source: usize,
    stages: Vec<Stage>,
    pub weight: ParamId,
    pub projection: Conv,
}

#[derive(Clone, Debug)]
pub struct Saff {
    terms: Vec<CrossTerm>,
    num_levels: usize,
}

impl Saff {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &ModelConfig) -> Self {
        let n = config.num_levels;
        let ch = &config.channels_per_level;
        let mut terms = Vec::with_capacity(n * n.saturating_sub(1));
        for i in 0..n {
            for k in 0..n {
                if i == k {
                    continue;
                }
                let name = format!("saff.{i}_{k}");
                let ck = ch[k];
                let stages = if k > i {
                    (0..k - i)
                        .map(|s| Stage::Up(ConvBlock::new(store, rng, &format!("{name}.up{s}"), ck, ck, 1, 1)))
                        .collect()
                } else {
                    (0..i - k)
                        .map(|s| Stage::Down(ConvBlock::new(store, rng, &format!("{name}.down{s}"), ck, ck, 3, 2)))
                        .collect()
                };
                let init = if config.freeze_saff_w { 1.0 } else { 0.0 };
                let weight = store.add(format!("{name}.w"), channel_vector(ck, init), ParamKind::FusionWeight);
                store.get_mut(weight).trainable = !config.freeze_saff_w;
                let projection = Conv::new(store, rng, &format!("{name}.proj"), ck, ch[i], 1, 1, false);
                if ck == ch[i] {
                    store.get_mut(projection.weight).value = identity_kernel(ck);
                }
                terms.push(CrossTerm { target: i, source: k, stages, weight, projection });
            }
        }
        Self { terms, num_levels: n }
    }

    pub fn terms(&self) -> &[CrossTerm] {
        &self.terms
    }

    /// The channel-wise weight vector `w_ik`.
    pub fn weight(&self, target: usize, source: usize) -> Option<ParamId> {
        self.term(target, source).map(|t| t.weight)
    }

    fn term(&self, target: usize, source: usize) -> Option<&CrossTerm> {
        self.terms.iter().find(|t| t.target == target && t.source == source)
    }

    /// `F_ik`: brings level `source` to the spatial size of level `target`.
    pub fn resample(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        target: usize,
        source: usize,
        mode: Mode,
    ) -> Result<Var> {
        if target == source {
            return Err(Error::Validation(format!("resample needs distinct levels, got {target} twice")));
        }
        let term = self
            .term(target, source)
            .ok_or_else(|| Error::Validation(format!("no fusion term {target} <- {source}")))?;
        let mut y = x;
        for stage in &term.stages {
            y = match stage {
                Stage::Up(block) => {
                    let z = block.forward(g, store, y, mode);
                    let s = g.shape(z);
                    g.resize(z, s.h * 2, s.w * 2)
                }
                Stage::Down(block) => block.forward(g, store, y, mode),
            };
        }
        Ok(y)
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        mode: Mode,
    ) -> Result<FeaturePyramid> {
        if pyramid.levels.len() != self.num_levels {
            return Err(config("num_levels", "pyramid depth does not match the fusion block"));
        }
        let mut fused = Vec::with_capacity(self.num_levels);
        for i in 0..self.num_levels {
            let mut acc = pyramid.levels[i];
            for k in 0..self.num_levels {
                if k == i {
                    continue;
                }
                let term = self.term(i, k).expect("all off-diagonal terms exist");
                let t = self.resample(g, store, pyramid.levels[k], i, k, mode)?;
                let w = g.param(store, term.weight);
                if g.shape(w).len() != g.shape(t).c {
                    return Err(config("saff.w", format!("w_{i}{k} length does not match transformed channels")));
                }
                let scaled = g.channel_scale(t, w);
                let projected = term.projection.forward(g, store, scaled);
                acc = g.add(acc, projected);
            }
            fused.push(acc);
        }
        Ok(FeaturePyramid { levels: fused })
    }
}
