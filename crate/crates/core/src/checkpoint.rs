//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MDTCKPT\0"
//! version      u32      1
//! header_len   u64
//! header       JSON     CheckpointHeader
//! count        u32      number of tensor entries
//! entries      count ×  { name_len u32, name utf8, rank u32, dims u64 × rank, values f64 × prod(dims) }
//! ```
//!
//! Entry names are `param/<path>`, `adam.m/<path>` and `adam.v/<path>`, in
//! parameter store order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{AdamConfig, AdamState, Tensor};
use crate::train::EpochRecord;

pub const MAGIC: &[u8; 8] = b"MDTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            let mut header = self.header.clone();
            header.optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step_count(),
            });
            let json = serde_json::to_vec(&header)?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            let groups = if self.optimizer.is_some() { 3 } else { 1 };
            w.write_all(&((self.params.len() * groups) as u32).to_le_bytes())?;
            for (_, name, t) in self.params.iter() {
                write_tensor(&mut w, &format!("param/{name}"), t)?;
            }
            if let Some(opt) = &self.optimizer {
                for (id, name, _) in self.params.iter() {
                    write_tensor(&mut w, &format!("adam.m/{name}"), opt.first_moment(id))?;
                }
                for (id, name, _) in self.params.iter() {
                    write_tensor(&mut w, &format!("adam.v/{name}"), opt.second_moment(id))?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        let mut r = Reader(BufReader::new(file));
        let mut magic = [0u8; 8];
        r.bytes(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt(format!("{} is not a checkpoint", path.display())));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u64()? as usize;
        if header_len > 1 << 30 {
            return Err(corrupt("header too large"));
        }
        let mut json = vec![0u8; header_len];
        r.bytes(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p, t).map_err(|e| corrupt(e.to_string()))?;
            } else if let Some(p) = name.strip_prefix("adam.m/") {
                first.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                second.push((p.to_string(), t));
            } else {
                return Err(corrupt(format!("unknown entry {name}")));
            }
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(opt) => {
                let order = |moments: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                    if moments.len() != params.len() {
                        return Err(corrupt("optimizer state does not cover every parameter"));
                    }
                    moments
                        .into_iter()
                        .zip(params.iter())
                        .map(|((n, t), (_, pn, pt))| {
                            if n != pn || t.shape() != pt.shape() {
                                Err(corrupt(format!("optimizer entry {n} does not match parameter {pn}")))
                            } else {
                                Ok(t)
                            }
                        })
                        .collect()
                };
                Some(AdamState::from_parts(opt.config, order(first)?, order(second)?, opt.step)?)
            }
        };
        Ok(Self { header, params, optimizer })
    }
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0.read_exact(buf).map_err(|_| corrupt("unexpected end of checkpoint"))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        if len > 4096 {
            return Err(corrupt("entry name too long"));
        }
        let mut name = vec![0u8; len];
        self.bytes(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("entry name is not utf-8"))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("entry {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| corrupt(format!("entry {name} is too large")))?;
        let mut raw = vec![0u8; n * 8];
        self.bytes(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(e.to_string()))?;
        Ok((name, t))
    }
}
