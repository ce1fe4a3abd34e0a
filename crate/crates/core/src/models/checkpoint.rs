//! Flat binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      5 bytes  "PLAB1"
//! spec_hash  u64
//! epoch      u64
//! seed       u64
//! records    u32
//! record*:   layer_id u32, name_len u16, name (utf-8), rank u8,
//!            dims u32 * rank, values f64 * prod(dims)
//! ```
//!
//! Parameters are written in model order, followed by batch-norm running
//! statistics named `running_mean` / `running_var`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelSpec, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PLAB1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub layer_id: u32,
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: u64,
    pub epoch: u64,
    pub seed: u64,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_state(spec: &ModelSpec, state: &ModelState, epoch: u64, seed: u64) -> Self {
        let mut records: Vec<Record> = state
            .params
            .iter()
            .map(|p| Record {
                layer_id: p.group as u32,
                name: p.name.clone(),
                tensor: Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec())
                    .expect("parameter shape is valid"),
            })
            .collect();
        // running stats belong to the groups that own batch-norm parameters
        let bn_groups = state
            .groups
            .iter()
            .filter(|g| g.params.iter().any(|&i| state.params[i].name == "gamma"));
        for (stats, group) in state.running.iter().zip(bn_groups) {
            for (name, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                records.push(Record {
                    layer_id: group.id as u32,
                    name: name.into(),
                    tensor: Tensor::new(vec![values.len()], values.clone())
                        .expect("channel count is positive"),
                });
            }
        }
        Checkpoint {
            spec_hash: spec.hash(),
            epoch,
            seed,
            records,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.spec_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.layer_id.to_le_bytes());
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.tensor.rank() as u8);
            for &d in r.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in r.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut rd = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if rd.take(5)? != MAGIC {
            return Err(rd.fail(0, "bad magic, expected PLAB1"));
        }
        let spec_hash = rd.u64()?;
        let epoch = rd.u64()?;
        let seed = rd.u64()?;
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let layer_id = rd.u32()?;
            let name_len = rd.u16()? as usize;
            let at = rd.pos;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| rd.fail(at, "record name is not utf-8"))?
                .to_string();
            let rank = rd.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let at = rd.pos;
            let raw = rd.take(numel * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor =
                Tensor::new(shape, values).map_err(|e| rd.fail(at, &format!("bad record: {e}")))?;
            records.push(Record {
                layer_id,
                name,
                tensor,
            });
        }
        if rd.pos != bytes.len() {
            return Err(rd.fail(rd.pos, "trailing bytes after last record"));
        }
        Ok(Checkpoint {
            spec_hash,
            epoch,
            seed,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rebuilds a model state, checking it was written for `spec`.
    pub fn restore(&self, spec: &ModelSpec) -> Result<ModelState> {
        if self.spec_hash != spec.hash() {
            return Err(Error::invalid(format!(
                "checkpoint spec hash {:016x} does not match model {:016x}",
                self.spec_hash,
                spec.hash()
            )));
        }
        let mut state = ModelState::init(spec, self.seed)?;
        let n_params = state.params.len();
        if self.records.len() != n_params + 2 * state.running.len() {
            return Err(Error::invalid(
                "checkpoint record count does not match model",
            ));
        }
        for (p, r) in state.params.iter_mut().zip(&self.records) {
            if p.name != r.name || p.tensor.shape() != r.tensor.shape() {
                return Err(Error::invalid(format!(
                    "record {} {:?} does not match parameter {} {:?}",
                    r.name,
                    r.tensor.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor = r.tensor.clone();
        }
        for (stats, pair) in state
            .running
            .iter_mut()
            .zip(self.records[n_params..].chunks(2))
        {
            stats.mean = pair[0].tensor.data().to_vec();
            stats.var = pair[1].tensor.data().to_vec();
        }
        Ok(state)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: &str) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(self.pos, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
