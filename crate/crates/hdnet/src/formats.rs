//! On-disk encodings for annotations and ground-truth grids.
//!
//! Annotations are JSON objects with `width`, `height` and
//! `points: [[x, y], ...]` in pixel coordinates, plus an optional `image_id`.
//!
//! Grids use a 16-byte little-endian header followed by row-major values:
//!
//! | offset | size | density (`.bin`)     | level mask (`.bin`)  |
//! |--------|------|----------------------|----------------------|
//! | 0      | 4    | magic `HDDM`         | magic `HDLM`         |
//! | 4      | 4    | height `u32`         | height `u32`         |
//! | 8      | 4    | width `u32`          | width `u32`          |
//! | 12     | 4    | resolution divisor   | number of levels `n` |
//! | 16     | ...  | `f32` persons/cell   | `u8` label in `0..=n`|

use std::path::Path;

use hdnet_core::gt::{DensityMap, LevelMaskGT, PointAnnotationSet};

use crate::error::{read, read_string, write, Error, Result};

pub const DENSITY_MAGIC: &[u8; 4] = b"HDDM";
pub const MASK_MAGIC: &[u8; 4] = b"HDLM";
const HEADER: usize = 16;

fn header(magic: &[u8; 4], a: usize, b: usize, c: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER);
    out.extend_from_slice(magic);
    for v in [a, b, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<[usize; 3]> {
    if bytes.len() < HEADER {
        return Err(Error::format(path, "file shorter than its 16-byte header"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(path, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    Ok([field(0), field(1), field(2)])
}

pub fn encode_density(map: &DensityMap) -> Vec<u8> {
    let mut out = header(DENSITY_MAGIC, map.height, map.width, map.divisor);
    out.reserve(map.values.len() * 4);
    for v in &map.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_density(bytes: &[u8], path: &Path) -> Result<DensityMap> {
    let [height, width, divisor] = parse_header(bytes, DENSITY_MAGIC, path)?;
    let body = &bytes[HEADER..];
    if body.len() != height * width * 4 {
        return Err(Error::format(path, format!("expected {} values for {height}x{width}", height * width)));
    }
    let values: Vec<f64> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::format(path, "density values must be finite and non-negative"));
    }
    Ok(DensityMap { height, width, divisor, values })
}

pub fn encode_mask(mask: &LevelMaskGT) -> Vec<u8> {
    let mut out = header(MASK_MAGIC, mask.height, mask.width, mask.num_levels);
    out.extend_from_slice(&mask.labels);
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<LevelMaskGT> {
    let [height, width, num_levels] = parse_header(bytes, MASK_MAGIC, path)?;
    let labels = bytes[HEADER..].to_vec();
    if labels.len() != height * width {
        return Err(Error::format(path, format!("expected {} labels for {height}x{width}", height * width)));
    }
    if let Some(l) = labels.iter().find(|&&l| l as usize > num_levels) {
        return Err(Error::format(path, format!("label {l} exceeds {num_levels} levels")));
    }
    Ok(LevelMaskGT { height, width, num_levels, labels })
}

pub fn read_density(path: &Path) -> Result<DensityMap> {
    decode_density(&read(path)?, path)
}

pub fn write_density(path: &Path, map: &DensityMap) -> Result<()> {
    write(path, encode_density(map))
}

pub fn read_mask(path: &Path) -> Result<LevelMaskGT> {
    decode_mask(&read(path)?, path)
}

pub fn write_mask(path: &Path, mask: &LevelMaskGT) -> Result<()> {
    write(path, encode_mask(mask))
}

/// Reads an annotation file; a missing `image_id` defaults to the file stem.
pub fn read_annotations(path: &Path) -> Result<PointAnnotationSet> {
    let mut ann: PointAnnotationSet = read_json(path)?;
    if ann.image_id.is_empty() {
        ann.image_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    ann.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(ann)
}

pub fn write_annotations(path: &Path, ann: &PointAnnotationSet) -> Result<()> {
    write_json(path, ann)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Error::format(path, format!("at {at}: {}", e.into_inner()))
    })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write(path, text)
}
