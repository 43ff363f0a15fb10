//! Density decoupling: per-pixel classification into background and `n`
//! ascending density levels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::gt::LevelMaskGT;
use crate::layers::{Conv, ConvBlock};
use crate::params::ParamStore;
use crate::tensor::{softmax_channels, Tensor};

#[derive(Clone, Debug)]
pub struct Ddm {
    block: ConvBlock,
    classifier: Conv,
    num_levels: usize,
}

impl Ddm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: &ModelConfig) -> Self {
        let cin: usize = config.channels_per_level.iter().sum();
        Self {
            block: ConvBlock::new(store, rng, "ddm.block", cin, config.head_channels, 3, 1),
            classifier: Conv::new(
                store,
                rng,
                "ddm.classifier",
                config.head_channels,
                config.num_levels + 1,
                1,
                1,
                true,
            ),
            num_levels: config.num_levels,
        }
    }

    /// 3x3 block then a bias-carrying 1x1 convolution to `n + 1` unbounded logits.
    pub fn decoupling_head(&self, g: &mut Graph, store: &ParamStore, x_dec: Var, mode: Mode) -> Var {
        let y = self.block.forward(g, store, x_dec, mode);
        self.classifier.forward(g, store, y)
    }

    pub fn num_classes(&self) -> usize {
        self.num_levels + 1
    }

    pub fn classifier(&self) -> &Conv {
        &self.classifier
    }
}

/// Upsamples every level to the finest resolution and concatenates along channels.
pub fn build_decoupling_input(g: &mut Graph, pyramid: &FeaturePyramid) -> Var {
    let s = g.shape(pyramid.levels[0]);
    let parts: Vec<Var> = pyramid.levels.iter().map(|&v| g.resize(v, s.h, s.w)).collect();
    g.concat(&parts)
}

/// Channel-wise softmax of `(N, n+1, h, w)` logits.
pub fn soft_masks(logits: &Tensor) -> Result<Tensor> {
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("mask logits contain NaN".into()));
    }
    Ok(softmax_channels(logits))
}

/// Flattens per-image labels to `(n, y, x)` order, checking shapes and range.
pub fn flatten_labels(logits_shape: crate::tensor::Shape, gts: &[&LevelMaskGT]) -> Result<Vec<u8>> {
    let s = logits_shape;
    if gts.len() != s.n {
        return Err(Error::Validation(format!("{} label maps for a batch of {}", gts.len(), s.n)));
    }
    let mut labels = Vec::with_capacity(s.n * s.plane());
    for gt in gts {
        if (gt.height, gt.width) != (s.h, s.w) {
            return Err(Error::Validation(format!(
                "label map is {}x{}, logits are {}x{}",
                gt.height, gt.width, s.h, s.w
            )));
        }
        if let Some(&bad) = gt.labels.iter().find(|&&l| l as usize >= s.c) {
            return Err(Error::Validation(format!("label {bad} outside 0..={}", s.c - 1)));
        }
        labels.extend_from_slice(&gt.labels);
    }
    Ok(labels)
}

/// Mean over locations of `-log softmax(logits)[label]`.
pub fn decoupling_loss(logits: &Tensor, gts: &[&LevelMaskGT]) -> Result<f64> {
    let labels = flatten_labels(logits.shape(), gts)?;
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let weights = vec![1.0; labels.len()];
    let loss = g.cross_entropy(x, labels, weights);
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(h: usize, w: usize, n: usize, f: impl Fn(usize) -> u8) -> LevelMaskGT {
        LevelMaskGT { height: h, width: w, num_levels: n, labels: (0..h * w).map(f).collect() }
    }

    #[test]
    fn equal_logits_give_uniform_masks() {
        let m = soft_masks(&Tensor::full(Shape::new(1, 4, 3, 3), 0.7)).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_softmax_values() {
        let t = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.0, libm::log(2.0), libm::log(3.0)]);
        let m = soft_masks(&t).unwrap();
        let expect = [1.0 / 6.0, 1.0 / 3.0, 0.5];
        for (a, b) in m.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let shifted = soft_masks(&t.map(|v| v + 123.0)).unwrap();
        for (a, b) in m.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_logits_are_rejected() {
        let t = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![f64::NAN, 0.0]);
        assert!(soft_masks(&t).is_err());
    }

    #[test]
    fn uniform_logits_cost_log_classes() {
        for n in 1..=4 {
            let t = Tensor::zeros(Shape::new(1, n + 1, 4, 4));
            let gt = labels(4, 4, n, |i| (i % (n + 1)) as u8);
            let loss = decoupling_loss(&t, &[&gt]).unwrap();
            assert!((loss - libm::log((n + 1) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_correct_channel_costs_nothing() {
        let gt = labels(3, 3, 2, |i| (i % 3) as u8);
        let mut t = Tensor::zeros(Shape::new(1, 3, 3, 3));
        for j in 0..9 {
            *t.at_mut(0, gt.labels[j] as usize, j / 3, j % 3) = 30.0;
        }
        assert!(decoupling_loss(&t, &[&gt]).unwrap() < 1e-9);
    }

    #[test]
    fn loss_matches_explicit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape::new(1, 4, 4, 4);
        let t = Tensor::from_vec(s, (0..s.len()).map(|_| rng.random_range(-3.0..3.0)).collect());
        let gt = labels(4, 4, 3, |i| ((i * 7) % 4) as u8);
        let mut total = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let z: f64 = (0..4).map(|c| libm::exp(t.at(0, c, y, x))).sum();
                total -= libm::log(libm::exp(t.at(0, gt.at(y, x) as usize, y, x)) / z);
            }
        }
        let loss = decoupling_loss(&t, &[&gt]).unwrap();
        assert!((loss - total / 16.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let t = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let gt = labels(2, 2, 1, |i| if i == 3 { 2 } else { 0 });
        assert!(matches!(decoupling_loss(&t, &[&gt]), Err(Error::Validation(_))));
    }

    #[test]
    fn decoupling_input_concatenates_upsampled_levels() {
        let mut g = Graph::new();
        let levels = [(16, 4, 1.0), (32, 2, 2.0), (64, 1, 3.0)]
            .iter()
            .map(|&(c, hw, v)| g.constant(Tensor::full(Shape::new(1, c, hw, hw), v)))
            .collect();
        let x = build_decoupling_input(&mut g, &FeaturePyramid { levels });
        let t = g.value(x);
        assert_eq!(t.shape(), Shape::new(1, 112, 4, 4));
        for c in 0..112 {
            let expect = if c < 16 {
                1.0
            } else if c < 48 {
                2.0
            } else {
                3.0
            };
            assert!(t.plane(0, c).iter().all(|&v| (v - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn head_shapes_and_zero_input() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ddm = Ddm::new(&mut store, &mut rng, &cfg);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(2, 56, 4, 6)));
        let logits = ddm.decoupling_head(&mut g, &store, x, Mode::Eval);
        assert_eq!(g.shape(logits), Shape::new(2, 4, 4, 6));
        let t = g.value(logits);
        for c in 0..4 {
            let first = t.plane(0, c)[0];
            assert!(t.plane(0, c).iter().chain(t.plane(1, c)).all(|&v| v == first));
        }
    }
}
