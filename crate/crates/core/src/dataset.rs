//! Training samples and batch assembly.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gt::{
    auto_thresholds, build_level_masks, pool_to_model_resolution, rasterize_density, DensityMap, GtConfig, LevelMaskGT,
    PointAnnotationSet, MODEL_DIVISOR,
};
use crate::synth::{standard_scene, Image};
use crate::tensor::{Shape, Tensor};

/// One image with its model-resolution targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Image zero-padded so both sides are multiples of [`MODEL_DIVISOR`].
    pub image: Image,
    /// Sum-pooled density target at `1 / MODEL_DIVISOR` resolution.
    pub density: DensityMap,
    pub labels: LevelMaskGT,
    /// Model-resolution cells covering the unpadded image.
    pub valid_height: usize,
    pub valid_width: usize,
    pub gt_count: f64,
}

pub fn round_up(v: usize, multiple: usize) -> usize {
    v.div_ceil(multiple) * multiple
}

/// Zero-pads an image on the bottom and right to the given size.
pub fn pad_image(image: &Image, height: usize, width: usize) -> Image {
    assert!(height >= image.height && width >= image.width);
    let mut out = Image::zeros(height, width);
    for y in 0..image.height {
        out.pixels[y * width..y * width + image.width]
            .copy_from_slice(&image.pixels[y * image.width..(y + 1) * image.width]);
    }
    out
}

/// Full-resolution density on a canvas padded to a multiple of 4, pooled to
/// model resolution.
pub fn density_target(annotations: &PointAnnotationSet, config: &GtConfig) -> Result<DensityMap> {
    annotations.validate()?;
    let padded = PointAnnotationSet {
        height: round_up(annotations.height, MODEL_DIVISOR),
        width: round_up(annotations.width, MODEL_DIVISOR),
        ..annotations.clone()
    };
    let full = rasterize_density(&padded, config)?;
    pool_to_model_resolution(&full, MODEL_DIVISOR)
}

pub fn make_sample(
    image: &Image,
    annotations: &PointAnnotationSet,
    density: DensityMap,
    config: &GtConfig,
) -> Result<Sample> {
    if (image.height, image.width) != (annotations.height, annotations.width) {
        return Err(Error::Validation(alloc::format!(
            "image {} is {}x{} but its annotations say {}x{}",
            annotations.image_id,
            image.height,
            image.width,
            annotations.height,
            annotations.width
        )));
    }
    let labels = build_level_masks(&density, config)?;
    let padded = pad_image(image, density.height * MODEL_DIVISOR, density.width * MODEL_DIVISOR);
    Ok(Sample {
        id: annotations.image_id.clone(),
        image: padded,
        gt_count: density.count(),
        valid_height: image.height.div_ceil(MODEL_DIVISOR),
        valid_width: image.width.div_ceil(MODEL_DIVISOR),
        density,
        labels,
    })
}

/// Merges every foreground level into level 1, for single-level models.
pub fn collapse_to_foreground(sample: &Sample) -> Sample {
    let labels = LevelMaskGT {
        num_levels: 1,
        labels: sample.labels.labels.iter().map(|&l| u8::from(l > 0)).collect(),
        ..sample.labels.clone()
    };
    Sample { labels, ..sample.clone() }
}

/// How level thresholds are chosen when building a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Thresholds {
    /// `k / n` quantiles of all foreground cells in the dataset.
    Auto,
    Fixed(Vec<f64>),
}

/// Builds samples for a set of scenes, deriving thresholds once over the set.
///
/// Returns the samples and the thresholds that were applied.
pub fn build_samples(
    scenes: &[(Image, PointAnnotationSet)],
    config: &GtConfig,
    thresholds: &Thresholds,
) -> Result<(Vec<Sample>, Vec<f64>)> {
    let densities = scenes.iter().map(|(_, a)| density_target(a, config)).collect::<Result<Vec<_>>>()?;
    let thresholds = match thresholds {
        Thresholds::Auto => auto_thresholds(&densities, config.num_levels, config.background_epsilon)?,
        Thresholds::Fixed(t) => t.clone(),
    };
    let cfg = GtConfig { level_thresholds: thresholds.clone(), ..config.clone() };
    cfg.validate()?;
    let samples = scenes
        .iter()
        .zip(densities)
        .map(|((img, ann), d)| make_sample(img, ann, d, &cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, thresholds))
}

/// Ground-truth settings for 64-pixel desk-scale scenes.
pub fn desk_gt_config(num_levels: usize) -> GtConfig {
    GtConfig {
        sigma: 2.0,
        num_levels,
        level_thresholds: vec![0.0; num_levels.saturating_sub(1)],
        ..GtConfig::default()
    }
}

/// The standard synthetic split: scenes for seeds `0..train` train, the next
/// `val` seeds validate. Thresholds come from the training scenes only.
pub fn standard_split(
    train: usize,
    val: usize,
    size: usize,
    config: &GtConfig,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<f64>)> {
    let scenes = (0..(train + val) as u64)
        .map(|s| standard_scene(s, size, size).map(|(img, ann)| (img.quantized(), ann)))
        .collect::<Result<Vec<_>>>()?;
    let (train_scenes, val_scenes) = scenes.split_at(train);
    let (train_samples, thresholds) = build_samples(train_scenes, config, &Thresholds::Auto)?;
    let (val_samples, _) = build_samples(val_scenes, config, &Thresholds::Fixed(thresholds.clone()))?;
    Ok((train_samples, val_samples, thresholds))
}

/// A padded mini-batch ready for the graph.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(N, 1, H, W)` images.
    pub images: Tensor,
    /// `(N, 1, H/4, W/4)` density targets.
    pub density: Tensor,
    /// Level labels in `(n, y, x)` order.
    pub labels: Vec<u8>,
    /// 1 on model-resolution cells inside an image, 0 on padding.
    pub weights: Vec<f64>,
    pub gt_counts: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Pads every sample to a common size divisible by `multiple`; `flips[i]`
/// mirrors sample `i` horizontally.
pub fn assemble_batch(samples: &[&Sample], multiple: usize, flips: Option<&[bool]>) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if !multiple.is_multiple_of(MODEL_DIVISOR) {
        return Err(Error::Padding { height: 0, width: 0, divisor: multiple });
    }
    let h = round_up(samples.iter().map(|s| s.image.height).max().unwrap_or(0), multiple);
    let w = round_up(samples.iter().map(|s| s.image.width).max().unwrap_or(0), multiple);
    let (mh, mw) = (h / MODEL_DIVISOR, w / MODEL_DIVISOR);
    let n = samples.len();
    let mut images = Tensor::zeros(Shape::new(n, 1, h, w));
    let mut density = Tensor::zeros(Shape::new(n, 1, mh, mw));
    let mut labels = vec![0u8; n * mh * mw];
    let mut weights = vec![0.0; n * mh * mw];
    for (i, s) in samples.iter().enumerate() {
        let flip = flips.is_some_and(|f| f[i]);
        let (iw, dw) = (s.image.width, s.density.width);
        let vw = s.valid_width;
        for y in 0..s.image.height {
            for x in 0..iw {
                let sx = if flip { iw - 1 - x } else { x };
                *images.at_mut(i, 0, y, x) = s.image.at(y, sx);
            }
        }
        for y in 0..s.density.height {
            for x in 0..dw {
                let sx = if flip { dw - 1 - x } else { x };
                *density.at_mut(i, 0, y, x) = s.density.at(y, sx);
                labels[(i * mh + y) * mw + x] = s.labels.at(y, sx);
                let valid = y < s.valid_height && if flip { x >= dw - vw } else { x < vw };
                if valid {
                    weights[(i * mh + y) * mw + x] = 1.0;
                }
            }
        }
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images,
        density,
        labels,
        weights,
        gt_counts: samples.iter().map(|s| s.gt_count).collect(),
    })
}
