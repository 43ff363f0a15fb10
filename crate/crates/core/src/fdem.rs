//! Foreground density estimation: `n` expert heads whose outputs are gated by
//! the foreground soft masks and summed into the final density map.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::layers::{Conv, ConvBlock};
use crate::params::ParamStore;
use crate::tensor::{argmax_one_hot, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct DensityHead {
    block: ConvBlock,
    out: Conv,
    pub level: usize,
}

impl DensityHead {
    /// 3x3 block, 1x1 convolution to one channel, ReLU, then bilinear resize
    /// to the model resolution `(h, w)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize, mode: Mode) -> Var {
        let y = self.block.forward(g, store, x, mode);
        let y = self.out.forward(g, store, y);
        let y = g.relu(y);
        g.resize(y, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Fdem {
    heads: Vec<DensityHead>,
}

impl Fdem {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &ModelConfig) -> Self {
        let heads = (0..config.num_levels)
            .map(|i| {
                let level = config.head_level(i);
                let c = config.channels_per_level[level];
                DensityHead {
                    block: ConvBlock::new(store, rng, &format!("fdem.head{i}.block"), c, config.head_channels, 3, 1),
                    out: Conv::new(store, rng, &format!("fdem.head{i}.out"), config.head_channels, 1, 1, 1, true),
                    level,
                }
            })
            .collect();
        Self { heads }
    }

    pub fn heads(&self) -> &[DensityHead] {
        &self.heads
    }
}

/// Result of gating head outputs with masks.
#[derive(Clone, Debug)]
pub struct FusedDensity {
    /// `D̂_i = D_i ⊙ M_i` for every head.
    pub masked: Vec<Var>,
    /// `D̃ = sum_i D̂_i`.
    pub density: Var,
}

/// Gates head `i` with mask channel `i + 1` and sums, in head order.
///
/// With `use_soft_masks == false` the masks are replaced by the argmax one-hot
/// of `logits`, held as a constant so no gradient reaches the mask branch.
pub fn fuse_density_graph(
    g: &mut Graph,
    heads: &[Var],
    logits: Var,
    masks: Var,
    use_soft_masks: bool,
) -> Result<FusedDensity> {
    let ms = g.shape(masks);
    if ms.c != heads.len() + 1 {
        return Err(Error::Validation(format!("{} mask channels for {} heads", ms.c, heads.len())));
    }
    for &h in heads {
        let hs = g.shape(h);
        if hs != Shape::new(ms.n, 1, ms.h, ms.w) {
            return Err(Error::Validation(format!(
                "head map {}x{} does not match masks {}x{}",
                hs.h, hs.w, ms.h, ms.w
            )));
        }
    }
    let gate = if use_soft_masks {
        masks
    } else {
        let hard = argmax_one_hot(g.value(logits));
        g.constant(hard)
    };
    let mut masked = Vec::with_capacity(heads.len());
    for (i, &d) in heads.iter().enumerate() {
        let m = g.slice_channels(gate, i + 1, 1);
        masked.push(g.mul(d, m));
    }
    let terms: Vec<(Var, f64)> = masked.iter().map(|&v| (v, 1.0)).collect();
    let density = g.lin_comb(&terms);
    Ok(FusedDensity { masked, density })
}

/// Forward-only form of [`fuse_density_graph`] on plain tensors.
///
/// `heads` are `(N, 1, h, w)` maps; `masks` is `(N, n+1, h, w)` with channel 0
/// the background. For truncated masks `masks` is first hardened to its argmax.
pub fn fuse_density(heads: &[Tensor], masks: &Tensor, use_soft_masks: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv: Vec<Var> = heads.iter().map(|t| g.constant(t.clone())).collect();
    let m = g.constant(masks.clone());
    let fused = fuse_density_graph(&mut g, &hv, m, m, use_soft_masks)?;
    Ok(g.value(fused.density).clone())
}
