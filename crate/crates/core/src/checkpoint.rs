//! Checkpoint persistence (`.adck`).
//!
//! Layout: magic `ADCK`, version byte, length-prefixed UTF-8 config JSON,
//! training metadata (step, seed, config hash), then named little-endian
//! f32 tensors. Parameters live on the f32 lattice, so save → load
//! reproduces every parameter bit-exactly.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{AdaptiveDecoderHead, BaseModel, ModelConfig};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ADCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u8,
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(self.version);
        let cfg = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.config_hash.len() as u16).to_le_bytes());
        buf.extend_from_slice(self.config_hash.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = cur.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(cur.take(cfg_len)?)?;
        let step = cur.u64()?;
        let seed = cur.u64()?;
        let hash_len = cur.u16()? as usize;
        let config_hash = String::from_utf8(cur.take(hash_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config hash is not UTF-8".into()))?;
        let n_tensors = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(4 * n)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { version, config, step, seed, config_hash, tensors })
    }

    pub fn from_base(model: &BaseModel, step: u64, seed: u64, config_hash: &str) -> Self {
        Checkpoint {
            version: VERSION,
            config: model.config.clone(),
            step,
            seed,
            config_hash: config_hash.to_string(),
            tensors: model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn from_head(head: &AdaptiveDecoderHead, config: &ModelConfig, step: u64, seed: u64, config_hash: &str) -> Self {
        let mut config = config.clone();
        config.temperature_grid = head.grid.clone();
        Checkpoint {
            version: VERSION,
            config,
            step,
            seed,
            config_hash: config_hash.to_string(),
            tensors: head.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn into_base(self) -> Result<BaseModel> {
        let mut model = BaseModel::init(self.config.clone(), 0)?;
        let mut found = 0usize;
        for (name, param) in model.named_params_mut() {
            let src = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.1.shape != param.shape {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            param.data = src.1.data.clone();
            found += 1;
        }
        if found != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model consumes {found}",
                self.tensors.len()
            )));
        }
        model.frozen = true;
        Ok(model)
    }

    pub fn into_head(self) -> Result<AdaptiveDecoderHead> {
        let mut head = AdaptiveDecoderHead::init(
            self.config.d_model,
            self.config.head_hidden,
            self.config.temperature_grid.clone(),
            0,
        )?;
        for (name, param) in head.named_params_mut() {
            let src = self
                .tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.1.shape != param.shape {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            param.data = src.1.data.clone();
        }
        Ok(head)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}
