//! Deterministic synthetic crowd scenes with point annotations.
//!
//! Heads are rendered as small isotropic bright blobs. The background carries
//! low-frequency shading plus elongated bars and wide discs of similar
//! brightness, so a model has to learn shape rather than intensity to
//! separate people from clutter.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use core::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::gt::PointAnnotationSet;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Quantizes to 8 bits and back, matching what a PNG round trip yields.
    pub fn quantized(&self) -> Image {
        Image { pixels: self.pixels.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(), ..*self }
    }
}

impl Image {
    fn splat(&mut self, cx: f64, cy: f64, sx: f64, sy: f64, angle: f64, amp: f64) {
        let reach = 3.5 * sx.max(sy);
        let (s, c) = (libm::sin(angle), libm::cos(angle));
        let y0 = libm::floor(cy - reach).max(0.0) as usize;
        let y1 = (libm::ceil(cy + reach) as usize).min(self.height.saturating_sub(1));
        let x0 = libm::floor(cx - reach).max(0.0) as usize;
        let x1 = (libm::ceil(cx + reach) as usize).min(self.width.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let e = (u * u) / (2.0 * sx * sx) + (v * v) / (2.0 * sy * sy);
                self.pixels[y * self.width + x] += amp * libm::exp(-e);
            }
        }
    }
}

pub fn to_u8(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// A group of people drawn around `center` with isotropic normal `spread`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: [f64; 2],
    pub spread: f64,
    pub count: usize,
}

pub fn generate_synthetic_scene(
    seed: u64,
    width: usize,
    height: usize,
    clusters: &[Cluster],
) -> Result<(Image, PointAnnotationSet)> {
    if width == 0 || height == 0 {
        return Err(config("size", "synthetic scene must have positive area"));
    }
    for c in clusters {
        let [x, y] = c.center;
        if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            return Err(config("clusters.center", format!("({x}, {y}) lies outside the {width}x{height} image")));
        }
        if !(c.spread >= 0.0 && c.spread.is_finite()) {
            return Err(config("clusters.spread", "must be non-negative and finite"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_x = width as f64 - 1e-3;
    let max_y = height as f64 - 1e-3;
    let mut points = Vec::new();
    for c in clusters {
        for _ in 0..c.count {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            let x = (c.center[0] + c.spread * dx).clamp(0.0, max_x);
            let y = (c.center[1] + c.spread * dy).clamp(0.0, max_y);
            points.push([x, y]);
        }
    }

    let mut img = Image::zeros(height, width);
    let scale = width.min(height) as f64 / 64.0;
    // low-frequency shading
    let base = rng.random_range(0.15..0.35);
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let (fx, fy, phase) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..TAU));
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width as f64;
            let v = y as f64 / height as f64;
            let wave = 0.05 * libm::sin(TAU * (fx * u + fy * v) + phase);
            img.pixels[y * width + x] = base + gx * (u - 0.5) + gy * (v - 0.5) + wave;
        }
    }
    // clutter: elongated bars and wide discs
    let n_bars = rng.random_range(2..6);
    for _ in 0..n_bars {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let len = rng.random_range(4.0..10.0) * scale;
        let angle = rng.random_range(0.0..PI);
        let amp = rng.random_range(0.25..0.5);
        img.splat(cx, cy, len, 0.8 * scale, angle, amp);
    }
    let n_discs = rng.random_range(1..4);
    for _ in 0..n_discs {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let r = rng.random_range(4.0..8.0) * scale;
        let amp = rng.random_range(-0.15..0.3);
        img.splat(cx, cy, r, r, 0.0, amp);
    }
    // heads
    let head_size = 1.1 * scale;
    for &[x, y] in &points {
        let amp = rng.random_range(0.35..0.6);
        img.splat(x, y, head_size, head_size, 0.0, amp);
    }
    let noise = Normal::new(0.0, 0.02).expect("finite std");
    for p in &mut img.pixels {
        *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }

    let ann = PointAnnotationSet { image_id: format!("scene_{seed:05}"), width, height, points };
    Ok((img, ann))
}

/// Upper bound on the number of people in a [`standard_clusters`] scene.
pub const STANDARD_MAX_PEOPLE: usize = 60;

/// Cluster layout of the standard desk-scale scene for `seed`: a total of
/// `0..=60` people split over one to three clusters.
pub fn standard_clusters(seed: u64, width: usize, height: usize) -> Vec<Cluster> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5_7e25_0000);
    let total = rng.random_range(0..=STANDARD_MAX_PEOPLE);
    let k = rng.random_range(1..=3usize);
    let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.random_range(0..=total)).collect();
    cuts.sort_unstable();
    cuts.push(total);
    let scale = width.min(height) as f64 / 64.0;
    let mut prev = 0;
    cuts.into_iter()
        .map(|cut| {
            let count = cut - prev;
            prev = cut;
            let margin = 0.15;
            Cluster {
                center: [
                    rng.random_range(margin..1.0 - margin) * width as f64,
                    rng.random_range(margin..1.0 - margin) * height as f64,
                ],
                spread: rng.random_range(2.0..10.0) * scale,
                count,
            }
        })
        .collect()
}

pub fn standard_scene(seed: u64, width: usize, height: usize) -> Result<(Image, PointAnnotationSet)> {
    generate_synthetic_scene(seed, width, height, &standard_clusters(seed, width, height))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_cluster_yields_no_points() {
        let c = [Cluster { center: [32.0, 32.0], spread: 5.0, count: 0 }];
        let (_, ann) = generate_synthetic_scene(7, 64, 64, &c).unwrap();
        assert!(ann.points.is_empty());
    }

    #[test]
    fn counts_add_up_and_points_stay_inside() {
        let c = [
            Cluster { center: [10.0, 10.0], spread: 20.0, count: 10 },
            Cluster { center: [50.0, 40.0], spread: 30.0, count: 25 },
        ];
        let (img, ann) = generate_synthetic_scene(7, 64, 64, &c).unwrap();
        assert_eq!(ann.count(), 35);
        ann.validate().unwrap();
        assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = standard_scene(3, 64, 64).unwrap();
        let b = standard_scene(3, 64, 64).unwrap();
        assert_eq!(a, b);
        let c = standard_scene(4, 64, 64).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(generate_synthetic_scene(0, 0, 64, &[]).is_err());
        let outside = [Cluster { center: [70.0, 1.0], spread: 1.0, count: 1 }];
        assert!(generate_synthetic_scene(0, 64, 64, &outside).is_err());
    }

    #[test]
    fn standard_scenes_respect_population_bound() {
        for seed in 0..50 {
            let clusters = standard_clusters(seed, 64, 64);
            let n: usize = clusters.iter().map(|c| c.count).sum();
            assert!(n <= STANDARD_MAX_PEOPLE);
            assert!((1..=3).contains(&clusters.len()));
        }
    }
}
