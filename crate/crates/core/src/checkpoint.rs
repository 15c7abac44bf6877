//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CSVTCKPT"  u32 version  u32 header_len  header (canonical JSON)
//! u32 count
//! count × { u32 name_len  name  u32 rank  rank × u64 dim  len × f64 }
//! ```
//!
//! The header holds `config`, `epoch`, `precision` and `seed` with keys
//! sorted, so equal checkpoints are byte-identical.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvShareViT, ModelConfig, NamedTensors};
use crate::tensor::{Precision, Tensor};

pub const MAGIC: &[u8; 8] = b"CSVTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    epoch: usize,
    precision: Precision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub precision: Precision,
    pub tensors: NamedTensors,
}

fn corrupt<T>(field: &str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint {
        field: field.to_string(),
        reason: reason.into(),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return corrupt(field, "file truncated");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn capture(model: &ConvShareViT, seed: u64, epoch: usize) -> Self {
        Checkpoint {
            config: model.config().clone(),
            seed,
            epoch,
            precision: model.precision(),
            tensors: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model. Every parameter must be present exactly once with
    /// the shape the config implies.
    pub fn restore(&self) -> Result<ConvShareViT> {
        let mut model = ConvShareViT::init(&self.config, &mut ChaCha8Rng::seed_from_u64(0))
            .or_else(|e| corrupt("config", e.to_string()))?;
        model.set_precision(self.precision);
        let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
        if let Some((extra, _)) = self.tensors.iter().find(|(n, _)| !names.contains(n)) {
            return corrupt(extra, "not a parameter of this model");
        }
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let mut found = self.tensors.iter().filter(|(n, _)| n == name);
            let Some((_, t)) = found.next() else {
                return corrupt(name, "missing");
            };
            if found.next().is_some() {
                return corrupt(name, "stored more than once");
            }
            if t.shape() != slot.shape() {
                return corrupt(name, format!("shape {:?}, expected {:?}", t.shape(), slot.shape()));
            }
            *slot = t.to_precision(self.precision);
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            precision: self.precision,
        };
        // Value maps are sorted by key.
        let json = serde_json::to_value(&header).and_then(|v| serde_json::to_string(&v)).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return corrupt("magic", "not a checkpoint file");
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return corrupt("version", format!("unsupported version {version}"));
        }
        let len = r.u32("header")? as usize;
        let header: Header = match serde_json::from_slice(r.take(len, "header")?) {
            Ok(h) => h,
            Err(e) => return corrupt("header", e.to_string()),
        };
        if let Err(e) = header.config.validate() {
            return corrupt("config", e.to_string());
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for i in 0..count {
            let field = format!("tensor #{i}");
            let n = r.u32(&field)? as usize;
            let name = match std::str::from_utf8(r.take(n, &field)?) {
                Ok(s) => s.to_string(),
                Err(_) => return corrupt(&field, "name is not UTF-8"),
            };
            let rank = r.u32(&name)? as usize;
            if rank > 8 {
                return corrupt(&name, format!("implausible rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&name)? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let Some(len) = len.filter(|&l| l <= (buf.len() - r.pos) / 8) else {
                return corrupt(&name, "file truncated");
            };
            let data = r
                .take(len * 8, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::with_precision(shape, data, header.precision).or_else(|e| corrupt(&name, e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return corrupt("trailer", format!("{} unexpected bytes", buf.len() - r.pos));
        }
        Ok(Checkpoint {
            config: header.config,
            seed: header.seed,
            epoch: header.epoch,
            precision: header.precision,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
