//! NSTM checkpoint container.
//!
//! Layout (integers little-endian):
//!   magic "NSTM" | format version u32 | config length u32 | config JSON |
//!   one record per parameter in registry order:
//!     name length u32 | name bytes | shape rank u32 | extents u32 × rank |
//!     values f64 × product(extents)
//! Records run to end of file. Loading rebuilds the model from the embedded
//! config and overwrites every parameter by name; optimizer moments are not
//! stored.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NSTM_MAGIC: &[u8; 4] = b"NSTM";
pub const NSTM_VERSION: u32 = 1;

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(NSTM_MAGIC);
    out.extend_from_slice(&NSTM_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for p in model.parameters() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    let bytes = model_to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                &self.path,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file holds {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn model_from_bytes(bytes: &[u8], origin: impl Into<PathBuf>) -> Result<Model> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: origin.into(),
    };
    let magic = cur.take(4, "magic")?;
    if magic != NSTM_MAGIC {
        return Err(Error::format(
            &cur.path,
            format!("bad magic {magic:?}, expected {NSTM_MAGIC:?}"),
        ));
    }
    let version = cur.u32("version")?;
    if version != NSTM_VERSION {
        return Err(Error::format(
            &cur.path,
            format!("unsupported version {version}, expected {NSTM_VERSION}"),
        ));
    }
    let config_len = cur.u32("config length")? as usize;
    let config_bytes = cur.take(config_len, "config")?;
    let cfg: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::format(&cur.path, format!("invalid embedded config: {e}")))?;
    let mut model = Model::new(cfg, 0)?;

    let mut remaining: HashSet<String> = model
        .parameters()
        .iter()
        .map(|p| p.name().to_string())
        .collect();
    while !cur.done() {
        let name_len = cur.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "parameter name")?)
            .map_err(|_| Error::format(&cur.path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = cur.u32("shape rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8, &format!("values of `{name}`"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
            .collect();
        if !remaining.remove(&name) {
            return Err(Error::format(
                &cur.path,
                format!("unexpected or duplicate parameter `{name}`"),
            ));
        }
        model.set_param_value(&name, Tensor::new(shape, data)?)?;
    }
    if !remaining.is_empty() {
        let mut missing: Vec<String> = remaining.into_iter().collect();
        missing.sort();
        return Err(Error::format(
            &cur.path,
            format!("missing parameters: {}", missing.join(", ")),
        ));
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}
