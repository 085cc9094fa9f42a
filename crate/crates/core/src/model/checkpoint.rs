//! Checkpoint container. Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "STETCKPT"
//! version    u32      1
//! config     u64 byte length + UTF-8 JSON of the model configuration
//! n_tensors  u64
//! per tensor:
//!   name     u32 byte length + UTF-8
//!   rank     u32
//!   dims     rank × u64
//!   data     prod(dims) × f64, row-major
//! n_meta     u64
//! per entry: key (u32 length + UTF-8), value (u64 length + UTF-8)
//! ```
//!
//! Tensor names beginning with `opt.` hold optimizer moments and are ignored
//! when rebuilding a model.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ModelConfig;
use crate::error::{Result, StetError};
use crate::signal::io::LeReader;
use crate::tensor::{NamedTensor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub meta: BTreeMap<String, String>,
}

/// `field: expected …, found …` for every top-level configuration field that
/// differs.
pub fn config_diff(expected: &ModelConfig, found: &ModelConfig) -> Vec<String> {
    let (a, b) = match (serde_json::to_value(expected), serde_json::to_value(found)) {
        (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) => (a, b),
        _ => return vec!["configuration is not serializable".into()],
    };
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| {
            let other = b.get(k).map(|o| o.to_string()).unwrap_or_else(|| "nothing".into());
            format!("{k}: expected {v}, found {other}")
        })
        .collect()
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| StetError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| StetError::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).expect("configuration is serializable");
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for nt in &self.tensors {
            w.write_all(&(nt.name.len() as u32).to_le_bytes())?;
            w.write_all(nt.name.as_bytes())?;
            let shape = nt.tensor.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in nt.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.meta.len() as u64).to_le_bytes())?;
        for (k, v) in &self.meta {
            w.write_all(&(k.len() as u32).to_le_bytes())?;
            w.write_all(k.as_bytes())?;
            w.write_all(&(v.len() as u64).to_le_bytes())?;
            w.write_all(v.as_bytes())?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| StetError::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }

    fn read_from(reader: impl Read, path: &Path) -> Result<Self> {
        let mut r = LeReader::new(reader);
        let io = |e| StetError::io(path, e);
        let parse = |offset: usize, msg: String| StetError::Parse { line: offset, msg };
        let magic = r.bytes(8).map_err(io)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(parse(0, "not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(parse(8, format!("unsupported checkpoint version {version}")));
        }
        let string = |r: &mut LeReader<_>, len: usize| -> Result<String> {
            let at = r.offset;
            let bytes = r.bytes(len).map_err(io)?;
            String::from_utf8(bytes).map_err(|e| parse(at, e.to_string()))
        };
        let cfg_len = r.u64().map_err(io)? as usize;
        let at = r.offset;
        let cfg_text = string(&mut r, cfg_len)?;
        let config: ModelConfig =
            serde_json::from_str(&cfg_text).map_err(|e| parse(at, format!("configuration block: {e}")))?;
        let n = r.u64().map_err(io)?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let len = r.u32().map_err(io)? as usize;
            let name = string(&mut r, len)?;
            let rank = r.u32().map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().map_err(io)? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel).map_err(io)?;
            tensors.push(NamedTensor {
                name,
                tensor: Tensor::new(shape, data)?,
            });
        }
        let n_meta = r.u64().map_err(io)?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let kl = r.u32().map_err(io)? as usize;
            let k = string(&mut r, kl)?;
            let vl = r.u64().map_err(io)? as usize;
            let v = string(&mut r, vl)?;
            meta.insert(k, v);
        }
        Ok(Self { config, tensors, meta })
    }
}
