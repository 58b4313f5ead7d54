//! Binary checkpoint container.
//!
//! Layout: the magic `TEDDNCKP`, a `u32` format version, a `u64` header
//! length, a JSON header, then for each parameter in registration order:
//! `u32` name length, name bytes, `u32` rank, `u64` per dimension, and the
//! little-endian payload. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use teddn_autograd::{Float, Tensor};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TeddnModel};

pub const MAGIC: &[u8; 8] = b"TEDDNCKP";
pub const FORMAT_VERSION: u32 = 1;

#[cfg(not(feature = "f32"))]
const DTYPE: &str = "f64";
#[cfg(feature = "f32")]
const DTYPE: &str = "f32";

const ELEM: usize = std::mem::size_of::<Float>();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub output_scale: Vec<Float>,
    pub num_params: usize,
}

/// A decoded checkpoint: header plus named tensors in file order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<(String, Tensor)>,
}

pub fn to_bytes(model: &TeddnModel) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        model: model.config.clone(),
        output_scale: model.output_scale.clone(),
        num_params: model.store.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + json.len() + model.param_count() * ELEM);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} overflows")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = r.len("header length")?;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {} values but this build uses {DTYPE}",
            header.dtype
        )));
    }
    let mut params = Vec::with_capacity(header.num_params);
    for i in 0..header.num_params {
        let nlen = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "parameter name")?)
            .map_err(|_| Error::Checkpoint(format!("parameter {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("parameter dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(ELEM))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let payload = r.take(numel, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(ELEM)
            .map(|c| Float::from_le_bytes(c.try_into().expect("element width")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { header, params })
}

impl Checkpoint {
    /// Rebuilds the model described by the header and loads every tensor.
    pub fn into_model(self) -> Result<TeddnModel> {
        let mut model = TeddnModel::build(self.header.model.clone(), 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Overwrites `model`'s parameters and output scale. Fails on the first
    /// parameter whose name or shape disagrees.
    pub fn apply_to(&self, model: &mut TeddnModel) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = model
            .store
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.value.shape().to_vec()))
            .collect();
        for (i, (name, shape)) in expected.iter().enumerate() {
            let Some((got_name, got)) = self.params.get(i) else {
                return Err(Error::Checkpoint(format!("parameter {name} missing from checkpoint")));
            };
            if got_name != name {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch at position {i}: model has {name}, checkpoint has {got_name}"
                )));
            }
            if got.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} in checkpoint but {shape:?} in model",
                    got.shape()
                )));
            }
        }
        if let Some((extra, _)) = self.params.get(expected.len()) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra} in checkpoint")));
        }
        if self.header.output_scale.len() != model.config.channels {
            return Err(Error::Checkpoint(format!(
                "output scale has {} channels, model has {}",
                self.header.output_scale.len(),
                model.config.channels
            )));
        }
        for (name, t) in &self.params {
            let id = model.store.id(name).expect("checked above");
            model.store.set_value(id, t.clone())?;
        }
        model.output_scale = self.header.output_scale.clone();
        Ok(())
    }
}

pub fn save(model: &TeddnModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn load(path: &Path) -> Result<TeddnModel> {
    read(path)?.into_model()
}
