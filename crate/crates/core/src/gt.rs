//! Ground-truth targets: Gaussian density maps from head points, count-preserving
//! pooling to model resolution, and density-level classification labels.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Resolution divisor between input images and model outputs.
pub const MODEL_DIVISOR: usize = 4;

/// Head-center annotations for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotationSet {
    #[serde(default)]
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl PointAnnotationSet {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(config("width/height", "image must have positive area"));
        }
        for (index, &[x, y]) in self.points.iter().enumerate() {
            let inside = x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64;
            if !inside {
                return Err(Error::PointOutOfBounds { index, x, y, width: self.width, height: self.height });
            }
        }
        Ok(())
    }
}

/// A row-major grid of non-negative per-pixel person densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    /// 1 for full-resolution maps, [`MODEL_DIVISOR`] for model-resolution targets.
    pub divisor: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, divisor: usize) -> Self {
        Self { height, width, divisor, values: vec![0.0; height * width] }
    }

    pub fn count(&self) -> f64 {
        self.values.iter().sum()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Per-cell density-level labels at model resolution; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMaskGT {
    pub height: usize,
    pub width: usize,
    pub num_levels: usize,
    pub labels: Vec<u8>,
}

impl LevelMaskGT {
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Number of cells carrying each label `0..=num_levels`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_levels + 1];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtConfig {
    /// Gaussian standard deviation in full-resolution pixels.
    pub sigma: f64,
    /// Half-width of the square kernel window; `None` means `ceil(4 * sigma)`.
    #[serde(default)]
    pub kernel_truncation_radius: Option<usize>,
    /// Pooled cells below this count are background.
    pub background_epsilon: f64,
    pub num_levels: usize,
    /// Ascending pooled-count boundaries between foreground levels, `num_levels - 1` entries.
    pub level_thresholds: Vec<f64>,
}

impl Default for GtConfig {
    fn default() -> Self {
        Self {
            sigma: 15.0,
            kernel_truncation_radius: None,
            background_epsilon: 1e-3,
            num_levels: 3,
            level_thresholds: vec![0.5, 2.0],
        }
    }
}

impl GtConfig {
    pub fn truncation_radius(&self) -> usize {
        self.kernel_truncation_radius.unwrap_or_else(|| libm::ceil(4.0 * self.sigma) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(config("sigma", "must be positive and finite"));
        }
        if self.background_epsilon.is_nan() || self.background_epsilon < 0.0 {
            return Err(config("background_epsilon", "must be non-negative"));
        }
        if self.num_levels == 0 {
            return Err(config("num_levels", "must be at least 1"));
        }
        if self.level_thresholds.len() != self.num_levels - 1 {
            return Err(config(
                "level_thresholds",
                alloc::format!("expected {} entries, got {}", self.num_levels - 1, self.level_thresholds.len()),
            ));
        }
        if self.level_thresholds.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(core::cmp::Ordering::Less)) {
            return Err(config("level_thresholds", "must be strictly ascending"));
        }
        Ok(())
    }
}

/// Renders each point as a truncated discrete Gaussian that sums to exactly
/// one inside the image, so the map's total equals the number of points.
pub fn rasterize_density(annotations: &PointAnnotationSet, config: &GtConfig) -> Result<DensityMap> {
    if !(config.sigma > 0.0 && config.sigma.is_finite()) {
        return Err(crate::error::config("sigma", "must be positive and finite"));
    }
    annotations.validate()?;
    let (h, w) = (annotations.height, annotations.width);
    let radius = config.truncation_radius() as isize;
    let two_var = 2.0 * config.sigma * config.sigma;
    let mut map = DensityMap::zeros(h, w, 1);
    let mut kernel = Vec::new();
    for &[px, py] in &annotations.points {
        let cx = libm::floor(px) as isize;
        let cy = libm::floor(py) as isize;
        let x0 = (cx - radius).max(0) as usize;
        let x1 = (cx + radius).min(w as isize - 1) as usize;
        let y0 = (cy - radius).max(0) as usize;
        let y1 = (cy + radius).min(h as isize - 1) as usize;
        kernel.clear();
        let mut total = 0.0;
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - py;
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - px;
                let v = libm::exp(-(dx * dx + dy * dy) / two_var);
                total += v;
                kernel.push(v);
            }
        }
        if total > 0.0 {
            let kw = x1 - x0 + 1;
            for (i, v) in kernel.iter().enumerate() {
                map.values[(y0 + i / kw) * w + x0 + i % kw] += v / total;
            }
        } else {
            // every tap underflowed; the containing pixel takes the whole unit
            map.values[cy as usize * w + cx as usize] += 1.0;
        }
    }
    Ok(map)
}

/// Sum-pools `divisor x divisor` blocks, preserving the total count.
pub fn pool_to_model_resolution(map: &DensityMap, divisor: usize) -> Result<DensityMap> {
    if divisor == 0 || !map.height.is_multiple_of(divisor) || !map.width.is_multiple_of(divisor) {
        return Err(Error::Padding { height: map.height, width: map.width, divisor });
    }
    let (oh, ow) = (map.height / divisor, map.width / divisor);
    let mut out = DensityMap::zeros(oh, ow, map.divisor * divisor);
    for y in 0..map.height {
        let row = &map.values[y * map.width..(y + 1) * map.width];
        let orow = &mut out.values[(y / divisor) * ow..(y / divisor + 1) * ow];
        for (x, v) in row.iter().enumerate() {
            orow[x / divisor] += v;
        }
    }
    Ok(out)
}

/// Label for one pooled value: 0 below `epsilon`, else `1 + #{t : value >= t}`.
pub fn level_of(value: f64, epsilon: f64, thresholds: &[f64]) -> u8 {
    if value < epsilon {
        0
    } else {
        1 + thresholds.iter().filter(|&&t| value >= t).count() as u8
    }
}

pub fn build_level_masks(pooled: &DensityMap, config: &GtConfig) -> Result<LevelMaskGT> {
    config.validate()?;
    if config.num_levels > u8::MAX as usize {
        return Err(crate::error::config("num_levels", "at most 255 levels are supported"));
    }
    let labels =
        pooled.values.iter().map(|&v| level_of(v, config.background_epsilon, &config.level_thresholds)).collect();
    Ok(LevelMaskGT { height: pooled.height, width: pooled.width, num_levels: config.num_levels, labels })
}

/// Quantile thresholds over all foreground cells (value `>= epsilon`) of a
/// dataset: the `k / num_levels` quantiles for `k = 1..num_levels`.
///
/// Equal quantiles are nudged upward so the result is strictly ascending.
pub fn auto_thresholds(pooled: &[DensityMap], num_levels: usize, epsilon: f64) -> Result<Vec<f64>> {
    if num_levels == 0 {
        return Err(crate::error::config("num_levels", "must be at least 1"));
    }
    if num_levels == 1 {
        return Ok(Vec::new());
    }
    let mut fg: Vec<f64> = pooled.iter().flat_map(|m| m.values.iter().copied()).filter(|&v| v >= epsilon).collect();
    if fg.is_empty() {
        return Err(Error::Validation("no foreground cells to derive level thresholds from".into()));
    }
    fg.sort_by(|a, b| a.total_cmp(b));
    let last = (fg.len() - 1) as f64;
    let mut out: Vec<f64> = Vec::with_capacity(num_levels - 1);
    for k in 1..num_levels {
        let pos = last * k as f64 / num_levels as f64;
        let lo = libm::floor(pos) as usize;
        let hi = (lo + 1).min(fg.len() - 1);
        let frac = pos - lo as f64;
        let mut q = fg[lo] * (1.0 - frac) + fg[hi] * frac;
        if let Some(&prev) = out.last() {
            if q <= prev {
                q = next_up(prev);
            }
        }
        out.push(q);
    }
    Ok(out)
}

fn next_up(v: f64) -> f64 {
    let bumped = f64::from_bits(v.to_bits() + 1);
    if v >= 0.0 {
        bumped
    } else {
        v + f64::EPSILON * v.abs().max(1.0)
    }
}
