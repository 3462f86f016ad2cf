//! Binary checkpoint format.
//!
//! ```text
//! "MMS1"  u32 version  u32 entry_count
//! entry*: u32 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!         u32 rank, u32 dims[rank], data (little-endian, row-major)
//! ```
//!
//! All integers are little-endian. Besides the model slots a checkpoint holds
//! `meta.model` (architecture numbers), `meta.preset.<name>` and whatever
//! extra entries the caller adds (optimizer moments, step counter).

use std::collections::BTreeMap;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::{MmsParams, ModelConfig};

pub const MAGIC: &[u8; 4] = b"MMS1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// Serializes named tensors in the given order.
pub fn encode_table<'a>(entries: impl IntoIterator<Item = (&'a str, DType, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dtype, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype as u8);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
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
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into `(name, dtype, tensor)` in file order.
pub fn decode_table(bytes: &[u8], path: &Path) -> Result<Vec<(String, DType, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not an MMS1 checkpoint"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?;
        let dtype = match r.take(1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            t => return Err(Error::format(path, format!("{name}: unknown dtype tag {t}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        out.push((name, dtype, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(out)
}

fn config_tensor(c: &ModelConfig) -> Tensor {
    let v = [
        c.grid_h, c.grid_w, c.patch_size, c.channels, c.d_model, c.depth, c.heads, c.mlp_ratio,
        c.dec_dim, c.dec_depth, c.dec_heads,
    ];
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).unwrap()
}

/// A decoded checkpoint: model parameters plus any extra entries.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: MmsParams,
    pub extras: BTreeMap<String, Tensor>,
}

/// Encodes parameters (in `dtype`) followed by `extras` (always `f64`).
pub fn encode_checkpoint(params: &MmsParams, extras: &[(String, Tensor)], dtype: DType) -> Vec<u8> {
    let cfg = config_tensor(&params.config);
    let preset_name = format!("meta.preset.{}", params.config.preset);
    let preset = Tensor::scalar(0.0);
    let named = params.weights.named();
    let mut entries: Vec<(&str, DType, &Tensor)> = vec![
        ("meta.model", DType::F64, &cfg),
        (preset_name.as_str(), DType::F64, &preset),
    ];
    entries.extend(named.iter().map(|(n, t)| (n.as_str(), dtype, *t)));
    entries.extend(extras.iter().map(|(n, t)| (n.as_str(), DType::F64, t)));
    encode_table(entries)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut table: BTreeMap<String, Tensor> = decode_table(bytes, path)?
        .into_iter()
        .map(|(n, _, t)| (n, t))
        .collect();
    let cfg = table
        .remove("meta.model")
        .ok_or_else(|| Error::format(path, "missing meta.model"))?;
    let preset = table
        .keys()
        .find_map(|k| k.strip_prefix("meta.preset.").map(str::to_string))
        .unwrap_or_else(|| "custom".to_string());
    table.remove(&format!("meta.preset.{preset}"));
    let v: Vec<usize> = cfg.data().iter().map(|&x| x as usize).collect();
    if v.len() != 11 {
        return Err(Error::format(path, "meta.model must hold 11 numbers"));
    }
    let config = ModelConfig {
        preset,
        grid_h: v[0],
        grid_w: v[1],
        patch_size: v[2],
        channels: v[3],
        d_model: v[4],
        depth: v[5],
        heads: v[6],
        mlp_ratio: v[7],
        dec_dim: v[8],
        dec_depth: v[9],
        dec_heads: v[10],
    };
    // shapes and slot names come from a template of the same architecture
    let template = MmsParams::init(&config, 0)?;
    let mut missing = None;
    let weights = template.weights.map(&mut |name, t| match table.remove(&name) {
        Some(v) if v.shape() == t.shape() => v,
        _ => {
            missing.get_or_insert(name);
            t.clone()
        }
    });
    if let Some(name) = missing {
        return Err(Error::format(path, format!("missing or misshapen parameter {name}")));
    }
    Ok(Checkpoint {
        params: MmsParams { config, weights },
        extras: table,
    })
}

pub fn save(path: &Path, params: &MmsParams, extras: &[(String, Tensor)], dtype: DType) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, extras, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_byte_exact() {
        let cfg = ModelConfig::preset("micro").unwrap();
        let p = MmsParams::init(&cfg, 3).unwrap();
        let extras = vec![("meta.step".to_string(), Tensor::scalar(17.0))];
        let bytes = encode_checkpoint(&p, &extras, DType::F64);
        let ck = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.extras["meta.step"].item(), 17.0);
        let again: Vec<(String, Tensor)> = ck.extras.into_iter().collect();
        assert_eq!(encode_checkpoint(&ck.params, &again, DType::F64), bytes);
    }

    #[test]
    fn f32_export_rounds_values() {
        let cfg = ModelConfig::preset("micro").unwrap();
        let p = MmsParams::init(&cfg, 3).unwrap();
        let bytes = encode_checkpoint(&p, &[], DType::F32);
        let ck = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        for ((_, a), (_, b)) in ck.params.weights.named().iter().zip(p.weights.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // f32 data re-encodes to identical bytes
        assert_eq!(encode_checkpoint(&ck.params, &[], DType::F32), bytes);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = encode_table([("ab", DType::F64, &t)]);
        assert_eq!(&bytes[..4], b"MMS1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..18], b"ab");
        assert_eq!(bytes[18], 1);
        assert_eq!(&bytes[19..23], &1u32.to_le_bytes());
        assert_eq!(&bytes[23..27], &2u32.to_le_bytes());
        assert_eq!(&bytes[27..35], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 43);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = Path::new("mem");
        assert!(decode_table(b"XXXX", p).is_err());
        let t = Tensor::scalar(1.0);
        let mut bytes = encode_table([("a", DType::F64, &t)]);
        bytes.pop();
        assert!(decode_table(&bytes, p).is_err());
        let mut bytes = encode_table([("a", DType::F64, &t)]);
        bytes.push(0);
        assert!(decode_table(&bytes, p).is_err());
    }
}
