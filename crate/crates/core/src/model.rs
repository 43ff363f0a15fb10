//! The assembled counting network: backbone, optional scale-adaptive fusion,
//! decoupling branch and mask-gated density experts.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{clone_unshared, Backbone, FeaturePyramid};
use crate::config::ModelConfig;
use crate::dataset::{pad_image, round_up, Batch};
use crate::ddm::{build_decoupling_input, Ddm};
use crate::error::Result;
use crate::fdem::{fuse_density_graph, Fdem};
use crate::graph::{Graph, Mode, Var};
use crate::gt::{DensityMap, MODEL_DIVISOR};
use crate::params::ParamStore;
use crate::saff::Saff;
use crate::synth::Image;
use crate::tensor::{Shape, Tensor};

/// Momentum of the batch-norm running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct HdNet {
    config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    ddm_backbone: Option<Backbone>,
    saff: Option<Saff>,
    ddm: Ddm,
    fdem: Fdem,
}

/// Graph handles of every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub pyramid: FeaturePyramid,
    pub fused: FeaturePyramid,
    pub logits: Var,
    pub masks: Var,
    /// `D_i`, upsampled to model resolution.
    pub heads: Vec<Var>,
    /// `D̂_i = D_i ⊙ M_i`.
    pub masked: Vec<Var>,
    /// `D̃`.
    pub density: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub reg: Var,
    pub dec: Var,
    pub total: Var,
}

/// Inference outputs cropped to the unpadded image, at model resolution.
/// Density maps are in persons per cell.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub heads: Vec<DensityMap>,
    /// `n + 1` soft masks, background first.
    pub masks: Vec<DensityMap>,
    pub masked: Vec<DensityMap>,
    pub density: DensityMap,
    pub count: f64,
}

impl HdNet {
    /// Builds the network with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (backbone, ddm_backbone) = if config.shared_backbone {
            (Backbone::new(&mut store, &mut rng, "backbone", &config), None)
        } else {
            let (a, b) = clone_unshared(&mut store, &mut rng, &config);
            (a, Some(b))
        };
        let saff = config.use_saff.then(|| Saff::new(&mut store, &mut rng, &config));
        let ddm = Ddm::new(&mut store, &mut rng, &config);
        let fdem = Fdem::new(&mut store, &mut rng, &config);
        Ok(Self { config, store, backbone, ddm_backbone, saff, ddm, fdem })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn saff(&self) -> Option<&Saff> {
        self.saff.as_ref()
    }

    pub fn ddm(&self) -> &Ddm {
        &self.ddm
    }

    pub fn fdem(&self) -> &Fdem {
        &self.fdem
    }

    /// Names of the decoupling-head parameters start with this prefix.
    pub const DDM_PREFIX: &'static str = "ddm.";

    pub fn forward(&self, g: &mut Graph, images: Tensor, mode: Mode) -> Result<ForwardPass> {
        let store = &self.store;
        let x = g.constant(images);
        let pyramid = self.backbone.extract_features(g, store, x, mode)?;
        let dec_pyramid = match &self.ddm_backbone {
            Some(b) => b.extract_features(g, store, x, mode)?,
            None => pyramid.clone(),
        };
        let fused = match &self.saff {
            Some(s) => s.fuse(g, store, &pyramid, mode)?,
            None => pyramid.clone(),
        };
        let x_dec = build_decoupling_input(g, &dec_pyramid);
        let logits = self.ddm.decoupling_head(g, store, x_dec, mode);
        let masks = g.softmax(logits);
        let out = g.shape(logits);
        let heads: Vec<Var> =
            self.fdem.heads().iter().map(|h| h.forward(g, store, fused.levels[h.level], out.h, out.w, mode)).collect();
        let f = fuse_density_graph(g, &heads, logits, masks, self.config.use_soft_masks)?;
        Ok(ForwardPass { pyramid, fused, logits, masks, heads, masked: f.masked, density: f.density })
    }

    /// Regression, decoupling and total losses of a forward pass over `batch`.
    pub fn losses(&self, g: &mut Graph, pass: &ForwardPass, batch: &Batch) -> LossVars {
        let mut target = batch.density.clone();
        target.scale(self.config.density_scale);
        let reg = g.mse(pass.density, target, batch.weights.clone());
        let dec = g.cross_entropy(pass.logits, batch.labels.clone(), batch.weights.clone());
        let total = g.lin_comb(&[(reg, 1.0), (dec, self.config.lambda_weight)]);
        LossVars { reg, dec, total }
    }

    /// Folds the batch statistics recorded on `g` into the running estimates.
    pub fn update_running_stats(&mut self, g: &Graph) {
        for s in g.batch_norm_stats() {
            for (id, obs) in [(s.running_mean, &s.mean), (s.running_var, &s.var)] {
                for (r, o) in self.store.get_mut(id).value.data_mut().iter_mut().zip(obs) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * o;
                }
            }
        }
    }

    /// Predicted counts for every item of a batch, evaluated in inference mode.
    pub fn predict_counts(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch.images.clone(), Mode::Eval)?;
        let d = g.value(pass.density);
        let s = d.shape();
        Ok((0..s.n)
            .map(|n| {
                let p = s.plane();
                d.plane(n, 0).iter().zip(&batch.weights[n * p..(n + 1) * p]).map(|(v, w)| v * w).sum::<f64>()
                    / self.config.density_scale
            })
            .collect())
    }

    /// Runs inference on one image of any size.
    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let m = self.config.input_multiple();
        let padded = pad_image(image, round_up(image.height, m), round_up(image.width, m));
        let input = Tensor::from_vec(Shape::new(1, 1, padded.height, padded.width), padded.pixels);
        let mut g = Graph::new();
        let pass = self.forward(&mut g, input, Mode::Eval)?;
        let vh = image.height.div_ceil(MODEL_DIVISOR);
        let vw = image.width.div_ceil(MODEL_DIVISOR);
        let scale = 1.0 / self.config.density_scale;
        let crop = |t: &Tensor, c: usize, factor: f64| {
            let s = t.shape();
            let mut values = Vec::with_capacity(vh * vw);
            for y in 0..vh {
                for x in 0..vw {
                    values.push(t.at(0, c, y, x) * factor);
                }
            }
            debug_assert!(vh <= s.h && vw <= s.w);
            DensityMap { height: vh, width: vw, divisor: MODEL_DIVISOR, values }
        };
        let masks_t = g.value(pass.masks);
        let masks = (0..masks_t.shape().c).map(|c| crop(masks_t, c, 1.0)).collect();
        let heads = pass.heads.iter().map(|v| crop(g.value(*v), 0, scale)).collect();
        let masked = pass.masked.iter().map(|v| crop(g.value(*v), 0, scale)).collect();
        let density = crop(g.value(pass.density), 0, scale);
        let count = density.count();
        Ok(Prediction { heads, masks, masked, density, count })
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Replaces the parameter store, e.g. after loading a checkpoint. Names
    /// and shapes must match this architecture.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(crate::Error::Validation(alloc::format!(
                "checkpoint holds {} tensors, architecture needs {}",
                store.len(),
                self.store.len()
            )));
        }
        for ((_, a), (_, b)) in self.store.iter().zip(store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(crate::Error::Validation(alloc::format!(
                    "checkpoint tensor {} does not match {}",
                    b.name,
                    a.name
                )));
            }
        }
        let trainable: Vec<bool> = self.store.iter().map(|(_, p)| p.trainable).collect();
        self.store = store;
        for ((_, p), t) in self.store.iter_mut().zip(trainable) {
            p.trainable = t;
        }
        Ok(())
    }
}
