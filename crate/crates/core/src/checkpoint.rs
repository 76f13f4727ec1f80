//! Binary checkpoints.
//!
//! Layout (little endian):
//! ```text
//! "S2M1"
//! u32 len, config text (UTF-8 `key = value` lines)
//! u32 record count
//! per record: u32 name len, name, u32 rank, u32 dims[rank], f32 payload
//! ```
//! Records follow parameter registration order, so the same model and values
//! always serialize to the same bytes. 64-bit stores are rounded to f32.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Integration, ModelConfig, S2mModel};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"S2M1";

pub fn to_bytes<F: Scalar>(model: &S2mModel, store: &ParamStore<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = model.config.to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for entry in store.entries() {
        out.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        out.extend_from_slice(entry.name.as_bytes());
        let shape = entry.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in entry.value.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save<F: Scalar>(path: &Path, model: &S2mModel, store: &ParamStore<F>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model, store)).map_err(|e| Error::io(path, e))
}

struct Reader<'b>(Cursor<&'b [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Reads only the model configuration.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader(Cursor::new(bytes));
    header(&mut r)?;
    ModelConfig::from_text(&r.string("config")?)
}

fn header(r: &mut Reader<'_>) -> Result<()> {
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    Ok(())
}

/// Rebuilds the model from the stored configuration and fills every
/// parameter. Names, shapes and the record count must match exactly. When
/// `expected` is given, a checkpoint trained with another integration
/// strategy is refused.
pub fn from_bytes<F: Scalar>(bytes: &[u8], expected: Option<Integration>) -> Result<(S2mModel, ParamStore<F>)> {
    let mut r = Reader(Cursor::new(bytes));
    header(&mut r)?;
    let config = ModelConfig::from_text(&r.string("config")?)?;
    if let Some(want) = expected {
        if want != config.integration {
            return Err(Error::Checkpoint(format!(
                "checkpoint uses integration {}, but {want} was requested",
                config.integration
            )));
        }
    }
    let blank = Tensor::zeros(vec![config.vocab_size, config.embed_dim]);
    let (model, mut store) = S2mModel::new::<F>(config, blank, 0)?;
    let count = r.u32("record count")?;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, model expects {}",
            store.len()
        )));
    }
    for i in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 4, &name)?;
        let data: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let entry = &store.entries()[i];
        if entry.name != name || entry.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "record {i}: found {name} {shape:?}, model expects {} {:?}",
                entry.name,
                entry.value.shape()
            )));
        }
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        store.assign(id, Tensor::new(shape, data)?)?;
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok((model, store))
}

pub fn load<F: Scalar>(path: &Path, expected: Option<Integration>) -> Result<(S2mModel, ParamStore<F>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}
