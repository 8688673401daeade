//! Binary checkpoints of a model and its color correction.
//!
//! `checkpoint_<iteration>.bin` holds every tensor bit-exactly:
//!
//! ```text
//! "MFCK" | version u32 | tensor count u32
//! per tensor: name length u32 | name | rank u32 | dims u64* | data f64*
//! ```
//!
//! all little-endian. A JSON sidecar with the same stem records the model
//! configuration and the color-correction anchor.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use multiface_core::autodiff::Tensor;
use multiface_core::error::Error;
use multiface_core::model::{AppearanceModel, ChannelAffine, ColorCorrection, ModelConfig};
use multiface_core::train::Normalizer;
use serde::{Deserialize, Serialize};

use crate::store::{read_json, write_atomic, write_json, Result, StoreError};

const MAGIC: &[u8; 4] = b"MFCK";
const VERSION: u32 = 1;
const COLOR_PREFIX: &str = "color.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub anchor: String,
    pub cameras: Vec<String>,
    pub iteration: u64,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.bin"))
}

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Structure(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<BTreeMap<String, Tensor>, Error> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Structure("not an MFCK checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Structure(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Structure("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> =
            (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Structure("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if out.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Duplicate(format!("tensor `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Structure("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

/// Writes `path` and its `.json` sidecar.
pub fn save_checkpoint(path: &Path, model: &AppearanceModel, cc: &ColorCorrection, iteration: u64) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = model
        .params
        .ids()
        .map(|p| (model.params.name(p).to_string(), model.params.get(p).clone().with_grad(false)))
        .collect();
    for id in cc.camera_ids() {
        let a = cc.get(id)?;
        tensors.insert(format!("{COLOR_PREFIX}{id}.gain"), Tensor::new(&[3], a.gain.to_vec())?);
        tensors.insert(format!("{COLOR_PREFIX}{id}.bias"), Tensor::new(&[3], a.bias.to_vec())?);
    }
    write_atomic(path, &encode_tensors(&tensors))?;
    let manifest = CheckpointManifest {
        model: model.config().clone(),
        anchor: cc.anchor().to_string(),
        cameras: cc.camera_ids().map(str::to_string).collect(),
        iteration,
    };
    write_json(&path.with_extension("json"), &manifest)
}

/// Restores a model for the capture whose statistics give `normalizer`.
pub fn load_checkpoint(
    path: &Path,
    normalizer: Normalizer,
) -> Result<(AppearanceModel, ColorCorrection, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&path.with_extension("json"))?;
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let wrap = |source| StoreError::Format { path: path.to_path_buf(), source };
    let mut tensors = decode_tensors(&bytes).map_err(wrap)?;
    let color: BTreeMap<String, Tensor> = {
        let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(COLOR_PREFIX)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let t = tensors.remove(&k).unwrap();
                (k, t)
            })
            .collect()
    };
    let mut cc = ColorCorrection::new(&manifest.anchor, manifest.cameras.iter().map(String::as_str))?;
    for id in &manifest.cameras {
        let get = |part: &str| -> Result<[f64; 3]> {
            let key = format!("{COLOR_PREFIX}{id}.{part}");
            let t = color.get(&key).ok_or_else(|| wrap(Error::Structure(format!("missing tensor `{key}`"))))?;
            <[f64; 3]>::try_from(t.data())
                .map_err(|_| wrap(Error::Shape { op: "color tensor", expected: vec![3], got: t.shape().to_vec() }))
        };
        cc.set(id, ChannelAffine { gain: get("gain")?, bias: get("bias")? })?;
    }
    let mut model = AppearanceModel::new(manifest.model.clone(), normalizer)?;
    model.load_params(&tensors).map_err(wrap)?;
    Ok((model, cc, manifest))
}
