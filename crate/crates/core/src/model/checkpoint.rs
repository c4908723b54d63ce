//! Binary checkpoint container: config, step counter, and named arrays.
//!
//! Layout: magic, JSON config (length-prefixed), step, array count, then
//! per array a length-prefixed name, rank, extents, and raw little-endian
//! f64 data. Loading preserves array order, so save → load → save is
//! byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SGGCKPT1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let config = serde_json::to_vec(&ckpt.config)
        .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Whole-file write through a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corpus(format!(
                "{}: truncated checkpoint at offset {}",
                self.path, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Corpus(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let clen = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(clen)?)
        .map_err(|e| Error::Corpus(format!("{}: bad config: {e}", path.display())))?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|e| Error::Corpus(format!("{}: bad array name: {e}", path.display())))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corpus(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config,
        step,
        arrays,
    })
}

impl Model {
    /// Write the model parameters (and training step) to `path`.
    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        let ckpt = Checkpoint {
            config: self.config.clone(),
            step,
            arrays: self
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        };
        save_checkpoint(path, &ckpt)
    }

    /// Rebuild a model from a checkpoint written by [`Model::save`] or the
    /// trainer; optimizer-state arrays are ignored here.
    pub fn load(path: &Path) -> Result<(Model, u64)> {
        let ckpt = load_checkpoint(path)?;
        let model = Model::from_checkpoint(&ckpt)?;
        Ok((model, ckpt.step))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let mut model = Model::new(ckpt.config.clone(), 0)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = ckpt.array(&name).ok_or_else(|| {
                Error::Corpus(format!("checkpoint missing parameter {name}"))
            })?;
            let dst = model.store.get_mut(id);
            if src.shape != dst.shape {
                return Err(Error::Corpus(format!(
                    "checkpoint parameter {name}: shape {:?} vs expected {:?}",
                    src.shape, dst.shape
                )));
            }
            dst.data = src.data.clone();
            dst.grad = None;
        }
        Ok(model)
    }
}
