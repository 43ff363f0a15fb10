//! 8-bit grayscale PNG input and heatmap output.
//!
//! Heatmaps are normalized by the map's own maximum and coloured with a fixed
//! five-stop ramp, linearly interpolated in RGB:
//!
//! | t    | RGB             |
//! |------|-----------------|
//! | 0.00 | (0, 0, 4)       |
//! | 0.25 | (81, 18, 124)   |
//! | 0.50 | (183, 55, 121)  |
//! | 0.75 | (252, 137, 97)  |
//! | 1.00 | (252, 253, 191) |
//!
//! An all-zero map renders entirely in the first colour.

use std::path::Path;

use hdnet_core::gt::DensityMap;
use hdnet_core::synth::{to_u8, Image};
use image::{GrayImage, RgbImage};

use crate::error::{io_err, Error, Result};

pub const COLORMAP: [(f64, [u8; 3]); 5] =
    [(0.0, [0, 0, 4]), (0.25, [81, 18, 124]), (0.5, [183, 55, 121]), (0.75, [252, 137, 97]), (1.0, [252, 253, 191])];

/// Colour for `t` in `[0, 1]`; values outside are clamped.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let i = COLORMAP.iter().rposition(|(s, _)| *s <= t).unwrap_or(0).min(COLORMAP.len() - 2);
    let (t0, c0) = COLORMAP[i];
    let (t1, c1) = COLORMAP[i + 1];
    let f = (t - t0) / (t1 - t0);
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (c0[k] as f64 + f * (c1[k] as f64 - c0[k] as f64)).round() as u8;
    }
    out
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => io_err(path)(io),
        other => Error::format(path, other.to_string()),
    }
}

/// Loads any PNG as grayscale with intensities in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Image {
        height: h as usize,
        width: w as usize,
        pixels: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    })
}

pub fn write_gray(path: &Path, image: &Image) -> Result<()> {
    let raw = image.pixels.iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(image.width as u32, image.height as u32, raw).expect("pixel count matches size");
    save(path, |p| img.save(p))
}

/// Writes a map as a heatmap normalized by its own maximum.
pub fn write_heatmap(path: &Path, map: &DensityMap) -> Result<()> {
    let max = map.values.iter().copied().fold(0.0, f64::max);
    let raw = map.values.iter().flat_map(|&v| colormap(if max > 0.0 { v / max } else { 0.0 })).collect();
    let img = RgbImage::from_raw(map.width as u32, map.height as u32, raw).expect("pixel count matches size");
    save(path, |p| img.save(p))
}

/// Writes a probability map in `[0, 1]` as grayscale without normalization.
pub fn write_probability(path: &Path, map: &DensityMap) -> Result<()> {
    write_gray(path, &Image { height: map.height, width: map.width, pixels: map.values.clone() })
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    f(path).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_hits_stops_and_clamps() {
        for (t, c) in COLORMAP {
            assert_eq!(colormap(t), c);
        }
        assert_eq!(colormap(-1.0), COLORMAP[0].1);
        assert_eq!(colormap(2.0), COLORMAP[4].1);
        assert_eq!(colormap(f64::NAN), COLORMAP[0].1);
        assert_eq!(colormap(0.125), [41, 9, 64]);
    }

    #[test]
    fn gray_round_trip_is_exact_for_8_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image {
            height: 2,
            width: 3,
            pixels: [0, 1, 17, 128, 254, 255].iter().map(|&v| v as f64 / 255.0).collect(),
        };
        write_gray(&p, &img).unwrap();
        assert_eq!(read_gray(&p).unwrap(), img);
        assert!(matches!(read_gray(&dir.path().join("none.png")), Err(Error::Missing(_))));
    }
}
