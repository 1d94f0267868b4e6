//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic           4 bytes  "GPCK"
//! format_version  u32
//! header_len      u64
//! header          header_len bytes of UTF-8 JSON (CheckpointHeader)
//! param_count     u64
//! param_count x   tensor record
//! moment_count    u64      0 when no optimizer state is stored
//! moment_count x  name, first-moment tensor record, second-moment tensor record
//!
//! tensor record:  name_len u64, name bytes, ndim u64, ndim x u64 dims,
//!                 prod(dims) x f64 values
//! ```
//!
//! Records are written in sorted name order, so equal contents always
//! produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, ModelParams, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GPCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub embedding_dim: usize,
    pub num_relations: usize,
    pub rng_seed: u64,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Model architecture, as written by the owner of the parameters.
    pub model: serde_json::Value,
    pub optimizer: Option<AdamWConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_name(&mut out, name);
            write_tensor(&mut out, t);
        }
        match &self.optimizer {
            None => out.extend_from_slice(&0u64.to_le_bytes()),
            Some(opt) => {
                let moments: Vec<_> = opt.moments().collect();
                out.extend_from_slice(&(moments.len() as u64).to_le_bytes());
                for (name, m, v) in moments {
                    write_name(&mut out, name);
                    write_tensor(&mut out, m);
                    write_tensor(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
        let mut params = ModelParams::default();
        for _ in 0..r.u64()? {
            let name = r.name()?;
            let t = r.tensor()?;
            params.insert(&name, t)?;
        }
        let moment_count = r.u64()?;
        let optimizer = if moment_count == 0 {
            None
        } else {
            let mut first = BTreeMap::new();
            let mut second = BTreeMap::new();
            for _ in 0..moment_count {
                let name = r.name()?;
                first.insert(name.clone(), r.tensor()?);
                second.insert(name, r.tensor()?);
            }
            let config = header.optimizer.clone().ok_or_else(|| {
                Error::Checkpoint("moments stored without optimizer config".into())
            })?;
            Some(AdamW::restore(config, header.step, first, second))
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u64).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u64()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}
