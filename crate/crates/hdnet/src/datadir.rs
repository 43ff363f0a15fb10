//! Dataset directories.
//!
//! ```text
//! DIR/
//!   images/<id>.png          8-bit grayscale
//!   annotations/<id>.json    point annotations
//!   gt/density/<id>.bin      model-resolution density (HDDM)
//!   gt/masks/<id>.bin        density-level labels (HDLM)
//!   gt/config.json           ground-truth settings, with resolved thresholds
//!   manifest.json
//! ```

use std::path::{Path, PathBuf};

use hdnet_core::dataset::{density_target, pad_image, Sample};
use hdnet_core::gt::{build_level_masks, DensityMap, GtConfig, PointAnnotationSet, MODEL_DIVISOR};
use hdnet_core::synth::Image;
use hdnet_core::tensor::{resize_bilinear, Shape, Tensor};

use crate::error::{io_err, Error, Result};
use crate::formats::{read_annotations, read_density, read_json, read_mask};
use crate::imageio::read_gray;

#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn image(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn annotation(&self, id: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{id}.json"))
    }

    pub fn density(&self, id: &str) -> PathBuf {
        self.root.join("gt").join("density").join(format!("{id}.bin"))
    }

    pub fn mask(&self, id: &str) -> PathBuf {
        self.root.join("gt").join("masks").join(format!("{id}.bin"))
    }

    pub fn gt_config_path(&self) -> PathBuf {
        self.root.join("gt").join("config.json")
    }

    pub fn gt_config(&self) -> Result<GtConfig> {
        read_json(&self.gt_config_path())
    }

    /// Image ids in sorted order, from the annotation files.
    pub fn ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("annotations");
        if !self.root.is_dir() {
            return Err(Error::Missing(self.root.clone()));
        }
        let mut ids: Vec<String> = std::fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Loads every sample. Images whose longer side exceeds `max_side` are
    /// downscaled and their targets rebuilt from the scaled annotations.
    pub fn load_samples(&self, max_side: Option<usize>, workers: usize) -> Result<Vec<Sample>> {
        let ids = self.ids()?;
        if ids.is_empty() {
            return Err(Error::format(&self.root, "dataset has no annotations"));
        }
        let gt = self.gt_config()?;
        let chunk = ids.len().div_ceil(workers.max(1));
        let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|s| {
            let handles: Vec<_> = ids
                .chunks(chunk)
                .map(|ids| s.spawn(|| ids.iter().map(|id| self.load_sample(id, &gt, max_side)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(ids.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn load_sample(&self, id: &str, gt: &GtConfig, max_side: Option<usize>) -> Result<Sample> {
        let ann = read_annotations(&self.annotation(id))?;
        let img_path = self.image(id);
        let image = read_gray(&img_path)?;
        if (image.height, image.width) != (ann.height, ann.width) {
            return Err(Error::format(
                &img_path,
                format!("image is {}x{}, annotations say {}x{}", image.height, image.width, ann.height, ann.width),
            ));
        }
        if let Some(limit) = max_side.filter(|&m| image.height.max(image.width) > m) {
            let (image, ann) = downscale(&image, &ann, limit);
            let density = density_target(&ann, gt)?;
            return sample_from(id, &image, density, None, gt, &self.root);
        }
        let density = read_density(&self.density(id))?;
        let labels = read_mask(&self.mask(id))?;
        sample_from(id, &image, density, Some(labels), gt, &self.root)
    }
}

fn sample_from(
    id: &str,
    image: &Image,
    density: DensityMap,
    labels: Option<hdnet_core::gt::LevelMaskGT>,
    gt: &GtConfig,
    root: &Path,
) -> Result<Sample> {
    let (vh, vw) = (image.height.div_ceil(MODEL_DIVISOR), image.width.div_ceil(MODEL_DIVISOR));
    if (density.height, density.width) != (vh, vw) {
        return Err(Error::format(
            root,
            format!("{id}: density is {}x{}, expected {vh}x{vw}", density.height, density.width),
        ));
    }
    let labels = match labels {
        Some(l) if (l.height, l.width) == (vh, vw) => l,
        Some(_) => return Err(Error::format(root, format!("{id}: level mask size does not match the density"))),
        None => build_level_masks(&density, gt)?,
    };
    Ok(Sample {
        id: id.to_string(),
        image: pad_image(image, vh * MODEL_DIVISOR, vw * MODEL_DIVISOR),
        gt_count: density.count(),
        density,
        labels,
        valid_height: vh,
        valid_width: vw,
    })
}

/// Bilinear downscale so the longer side equals `limit`, with points scaled alike.
pub fn downscale(image: &Image, ann: &PointAnnotationSet, limit: usize) -> (Image, PointAnnotationSet) {
    let scale = limit as f64 / image.height.max(image.width) as f64;
    let h = ((image.height as f64 * scale).round() as usize).max(1);
    let w = ((image.width as f64 * scale).round() as usize).max(1);
    let t = Tensor::from_vec(Shape::new(1, 1, image.height, image.width), image.pixels.clone());
    let small = Image { height: h, width: w, pixels: resize_bilinear(&t, h, w).into_vec() };
    let (sx, sy) = (w as f64 / image.width as f64, h as f64 / image.height as f64);
    let clamp = |v: f64, n: usize| v.min(n as f64 - 1e-6).max(0.0);
    let points = ann.points.iter().map(|[x, y]| [clamp(x * sx, w), clamp(y * sy, h)]).collect();
    (small, PointAnnotationSet { image_id: ann.image_id.clone(), width: w, height: h, points })
}
