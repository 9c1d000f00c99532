use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optimizer::AdamW;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::objective::Mode;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSRL";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENT1: &str = "optimizer.m.";
const MOMENT2: &str = "optimizer.v.";

/// Sidecar written next to every checkpoint as `<stem>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: Mode,
    pub model: ModelConfig,
    /// Effective run configuration, echoed verbatim.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub seed: u64,
    pub optimizer_step: u64,
    /// SHA-256 of the checkpoint bytes.
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ParamStore<S>,
    pub optimizer: Option<AdamW<S>>,
    pub meta: Option<CheckpointMeta>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

fn push_record<S: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[S]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(S::DTYPE_TAG);
    for &v in data {
        v.write_le(out);
    }
}

/// Serializes parameters and, when given, the optimizer moments.
pub fn encode_checkpoint<S: Scalar>(params: &ParamStore<S>, optimizer: Option<&AdamW<S>>) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for p in params.iter() {
        if p.name.starts_with("optimizer.") || !seen.insert(p.name.as_str()) {
            return Err(Error::Schema(format!("tensor name collision: {}", p.name)));
        }
    }
    let count = params.len() * if optimizer.is_some() { 3 } else { 1 };
    let mut out = Vec::with_capacity(16 + params.num_scalars() * std::mem::size_of::<S>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in params.iter() {
        push_record(&mut out, &p.name, &p.shape, &p.data);
    }
    if let Some(opt) = optimizer {
        for (prefix, moments) in [(MOMENT1, &opt.m), (MOMENT2, &opt.v)] {
            for (p, m) in params.iter().zip(moments) {
                push_record(&mut out, &format!("{prefix}{}", p.name), &p.shape, m);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            detail: format!("{what} needs {n} bytes at offset {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Raw tensors of a checkpoint file, converted to `S`.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8], path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<S>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = r.u64("record count")?;
    let mut names = HashSet::new();
    let mut records = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Schema(format!("record {i} has a non-UTF-8 name")))?;
        if !names.insert(name.clone()) {
            return Err(Error::Schema(format!("tensor name collision: {name}")));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::DimOverflow {
            path: path.to_path_buf(),
            detail: format!("{name} has shape {shape:?}"),
        })?;
        let tag = r.u8_tag()?;
        let width = match tag {
            0 => 4,
            1 => 8,
            t => return Err(Error::Schema(format!("{name} has unknown dtype tag {t}"))),
        };
        let nbytes = numel.checked_mul(width).ok_or_else(|| Error::DimOverflow {
            path: path.to_path_buf(),
            detail: format!("{name} payload size overflows"),
        })?;
        let payload = r.take(nbytes, &format!("payload of {name}"))?;
        let data = if width == 4 {
            payload
                .chunks_exact(4)
                .map(|c| S::c(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|c| S::c(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        records.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Schema(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
    }
    Ok(records)
}

impl Reader<'_> {
    fn u8_tag(&mut self) -> Result<u8> {
        Ok(self.take(1, "dtype tag")?[0])
    }
}

/// Writes the checkpoint and its sidecar; the sidecar's hash is filled in here.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    params: &ParamStore<S>,
    optimizer: Option<&AdamW<S>>,
    meta: Option<CheckpointMeta>,
) -> Result<CheckpointMeta> {
    let bytes = encode_checkpoint(params, optimizer)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mut meta = meta.unwrap_or_else(|| CheckpointMeta {
        mode: Mode::Cscrl,
        model: ModelConfig::default(),
        config: serde_json::Value::Null,
        epoch: 0,
        seed: 0,
        optimizer_step: 0,
        content_hash: String::new(),
    });
    meta.content_hash = hex::encode(Sha256::digest(&bytes));
    meta.optimizer_step = optimizer.map_or(meta.optimizer_step, |o| o.step);
    let mp = meta_path(path);
    std::fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mp, e))?;
    Ok(meta)
}

/// Reads a checkpoint and its sidecar (when present). Tensor groups are reset
/// to 0; rebuild the model and copy by name to recover them.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode_checkpoint::<S>(&bytes, path)?;
    let mp = meta_path(path);
    let meta: Option<CheckpointMeta> = if mp.exists() {
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let hash = hex::encode(Sha256::digest(&bytes));
        if meta.content_hash != hash {
            return Err(Error::Schema(format!(
                "{} does not match its metadata hash",
                path.display()
            )));
        }
        Some(meta)
    } else {
        None
    };

    let mut params = ParamStore::new();
    let mut moments: Vec<(String, Vec<usize>, Vec<S>)> = Vec::new();
    for (name, shape, data) in records {
        if name.starts_with("optimizer.") {
            moments.push((name, shape, data));
        } else {
            params.add(name, shape, data, 0);
        }
    }
    let optimizer = if moments.is_empty() {
        None
    } else {
        let mut opt = AdamW::new(&params);
        opt.step = meta.as_ref().map_or(0, |m| m.optimizer_step);
        for (name, shape, data) in moments {
            let (slot, base) = if let Some(b) = name.strip_prefix(MOMENT1) {
                (&mut opt.m, b)
            } else if let Some(b) = name.strip_prefix(MOMENT2) {
                (&mut opt.v, b)
            } else {
                return Err(Error::Schema(format!("unknown optimizer record {name}")));
            };
            let id = params
                .find(base)
                .ok_or_else(|| Error::Schema(format!("optimizer record {name} has no parameter")))?;
            if params.get(id).shape != shape {
                return Err(Error::Schema(format!("optimizer record {name} has shape {shape:?}")));
            }
            slot[id.index()] = data;
        }
        Some(opt)
    };
    Ok(Checkpoint {
        params,
        optimizer,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Classifier, CsCrl};

    fn bits32(s: &ParamStore<f32>) -> Vec<u32> {
        s.iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = CsCrl::<f32>::build(&ModelConfig::tiny(), 3).unwrap();
        let mut opt = AdamW::new(&model.params);
        opt.m[0][0] = 0.25;
        opt.v[1][0] = 1.5e-9;
        opt.step = 7;
        save_checkpoint(&path, &model.params, Some(&opt), None).unwrap();
        assert!(dir.path().join("m.meta.json").exists());
        let ck = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(bits32(&ck.params), bits32(&model.params));
        let loaded = CsCrl::with_params(&ModelConfig::tiny(), ck.params).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(ck.optimizer.unwrap(), opt);

        let wide = CsCrl::<f64>::build(&ModelConfig::tiny(), 3).unwrap();
        save_checkpoint(&path, &wide.params, None, None).unwrap();
        assert_eq!(CsCrl::with_params(&ModelConfig::tiny(), load_checkpoint::<f64>(&path).unwrap().params).unwrap(), wide);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let model = CsCrl::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
        let mut bytes = encode_checkpoint(&model.params, None).unwrap();
        bytes[4..8].copy_from_slice(&999u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::UnsupportedVersion { found: 999, .. })));

        let good = encode_checkpoint(&model.params, None).unwrap();
        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Truncated { .. })));

        let mut magic = good.clone();
        magic[0] = b'X';
        std::fs::write(&path, &magic).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn missing_tensor_is_named() {
        let mut partial = ParamStore::<f32>::new();
        partial.add("encoder.norm.gain", vec![32], vec![1.0; 32], 0);
        let err = Classifier::with_params(&ModelConfig::tiny(), partial).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("encoder.patch_embed.weight")), "{err}");
    }

    #[test]
    fn duplicate_names_collide() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.ckpt");
        let mut s = ParamStore::<f32>::new();
        s.add("a", vec![1], vec![1.0], 0);
        let mut bytes = encode_checkpoint(&s, None).unwrap();
        let record = bytes[16..].to_vec();
        bytes.extend_from_slice(&record);
        bytes[8..16].copy_from_slice(&2u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Schema(m)) if m.contains("collision")));
        let mut clash = ParamStore::<f32>::new();
        clash.add("optimizer.m.a", vec![1], vec![1.0], 0);
        assert!(encode_checkpoint(&clash, None).is_err());
    }

    #[test]
    fn tampered_file_fails_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ckpt");
        let model = CsCrl::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
        save_checkpoint(&path, &model.params, None, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Schema(_))));
    }
}
