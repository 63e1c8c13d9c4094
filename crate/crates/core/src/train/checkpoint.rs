//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AERO" | u32 version | u32 len, model config (key = value text)
//! u32 entry count | per entry: u16 name len, name, u8 ndim, u64 dims…, u8 dtype, u64 offset, u64 numel
//! u64 payload len | payload: f64 values of every entry back to back
//! u32 CRC32 of everything above
//! ```
//!
//! Spectral-norm power-iteration vectors are stored as extra entries named
//! `spectral.<param>.u` / `.v`.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{AeroError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AERO";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

fn entries(model: &Model) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model.params().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
    for s in model.spectral_states() {
        let name = model.params().name(s.param);
        out.push((format!("spectral.{name}.u"), Tensor::new(&[s.u.len()], s.u.clone()).expect("vector")));
        out.push((format!("spectral.{name}.v"), Tensor::new(&[s.v.len()], s.v.clone()).expect("vector")));
    }
    out
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = model.config().to_kv();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());

    let entries = entries(model);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.ndim() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&offset.to_le_bytes());
        buf.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        offset += 8 * t.numel() as u64;
    }
    buf.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in &entries {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| AeroError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| AeroError::Corrupt("size does not fit in memory".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| AeroError::Corrupt("non-UTF-8 text".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
        return Err(AeroError::Corrupt("missing AERO magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(AeroError::Version { found: version, expected: FORMAT_VERSION });
    }
    let stored_crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored_crc {
        return Err(AeroError::Corrupt("CRC32 mismatch".into()));
    }

    let cfg_len = r.u32()? as usize;
    let cfg = ModelConfig::from_kv(&r.string(cfg_len)?)
        .map_err(|e| AeroError::Corrupt(format!("embedded config: {e}")))?;
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.string(n)?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if r.u8()? != DTYPE_F64 {
            return Err(AeroError::Corrupt(format!("{name}: unsupported dtype")));
        }
        let offset = r.u64()?;
        let numel = r.usize()?;
        if shape.iter().product::<usize>() != numel {
            return Err(AeroError::Corrupt(format!("{name}: shape {shape:?} does not hold {numel} values")));
        }
        manifest.push(ManifestEntry { name, shape, offset });
    }
    let payload_len = r.usize()?;
    let payload = r.take(payload_len)?;
    if r.pos != body.len() {
        return Err(AeroError::Corrupt("trailing bytes after payload".into()));
    }

    let mut model = Model::new(cfg).map_err(|e| AeroError::Corrupt(format!("embedded config: {e}")))?;
    let mut seen = std::collections::HashSet::new();
    for e in &manifest {
        let numel: usize = e.shape.iter().product();
        let start = usize::try_from(e.offset).map_err(|_| AeroError::Corrupt("offset overflow".into()))?;
        let end = start
            .checked_add(8 * numel)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| AeroError::Corrupt(format!("{}: data runs past the payload", e.name)))?;
        let data: Vec<f64> =
            payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if let Some(param) = e.name.strip_prefix("spectral.") {
            let (param, which) = param.rsplit_once('.').ok_or_else(|| AeroError::Corrupt(e.name.clone()))?;
            let id = model.params().id(param).ok_or_else(|| AeroError::Corrupt(format!("unknown entry {}", e.name)))?;
            let state = model
                .spectral_states_mut()
                .iter_mut()
                .find(|s| s.param == id)
                .ok_or_else(|| AeroError::Corrupt(format!("{param} is not spectrally normalized")))?;
            let slot = match which {
                "u" => &mut state.u,
                "v" => &mut state.v,
                _ => return Err(AeroError::Corrupt(format!("unknown entry {}", e.name))),
            };
            if slot.len() != data.len() {
                return Err(AeroError::Corrupt(format!("{}: wrong length", e.name)));
            }
            *slot = data;
        } else {
            model
                .params_mut()
                .set(&e.name, Tensor::new(&e.shape, data)?)
                .map_err(|err| AeroError::Corrupt(format!("{}: {err}", e.name)))?;
        }
        if !seen.insert(e.name.as_str()) {
            return Err(AeroError::Corrupt(format!("duplicate entry {}", e.name)));
        }
    }
    let needed = model.params().len() + 2 * model.spectral_states().len();
    if seen.len() != needed {
        return Err(AeroError::Corrupt(format!("checkpoint holds {} of {needed} entries", seen.len())));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| AeroError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| AeroError::io(path, e))?;
    decode(&bytes)
}
