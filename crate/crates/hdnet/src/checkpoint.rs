//! Checkpoint container.
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! "HDCK"  version  config_len  config_json[config_len]
//! tensor_count
//! repeated tensor_count times:
//!     name_len  name[name_len]  rank  dims[rank]  f32 values[prod(dims)]
//! ```
//!
//! `config_json` is the model configuration. Tensor names are parameter paths
//! such as `backbone.level1.block0.conv.weight`, written in construction order.

use std::path::Path;

use hdnet_core::tensor::{Shape, Tensor};
use hdnet_core::{HdNet, ModelConfig};

use crate::error::{read, write, Error, Result};

pub const MAGIC: &[u8; 4] = b"HDCK";
pub const VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &HdNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    put(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    put(&mut out, model.store.len());
    for (_, p) in model.store.iter() {
        put(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        let s = p.value.shape();
        put(&mut out, 4);
        for d in [s.n, s.c, s.h, s.w] {
            put(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<HdNet> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, format!("model config: {e}")))?;
    let mut model = HdNet::new(config, 0).map_err(|e| Error::format(path, e.to_string()))?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::format(path, format!("{count} tensors, the architecture has {}", model.store.len())));
    }
    let mut seen = vec![false; model.store.len()];
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let id = model.store.find(name).ok_or_else(|| Error::format(path, format!("unknown tensor {name}")))?;
        let rank = r.u32()?;
        if rank != 4 {
            return Err(Error::format(path, format!("tensor {name} has rank {rank}, expected 4")));
        }
        let shape = Shape::new(r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let param = model.store.get_mut(id);
        if shape != param.value.shape() || seen[id.index()] {
            return Err(Error::format(path, format!("tensor {name} is duplicated or has the wrong shape")));
        }
        seen[id.index()] = true;
        let data = r
            .take(shape.len() * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        param.value = Tensor::from_vec(shape, data);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    Ok(model)
}

pub fn save(path: &Path, model: &HdNet) -> Result<()> {
    write(path, encode(model))
}

pub fn load(path: &Path) -> Result<HdNet> {
    decode(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_f32_values() {
        let mut model = HdNet::new(ModelConfig::default(), 3).unwrap();
        model.store.round_to_f32();
        let bytes = encode(&model);
        assert_eq!(&bytes[..8], b"HDCK\x01\x00\x00\x00");
        let back = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config(), model.config());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncated_or_mismatched_files_fail() {
        let model = HdNet::new(ModelConfig::with_levels(2), 0).unwrap();
        let bytes = encode(&model);
        let p = Path::new("x");
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, p).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
    }
}
