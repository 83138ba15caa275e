//! Binary checkpoint of a [`ContextStore`].
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! "CRWN"  u32 version  u64 fingerprint  u8 precision  u64 seed
//! u32 len + architecture JSON
//! u32 n_layers, n_layers × u64 context length
//! u8 flags (bit 0: trained bases follow the task records)
//! u32 n_tasks, then per task:
//!     u32 task id, f64 alpha, u32 n_vs, per v: u64 len + len × f64
//! [u32 n_bases, per basis: u64 rows, u64 cols, rows·cols × f64]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::context::{ContextStore, TaskContext};
use crate::error::{format_err, Result};
use crate::scalar::{Precision, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRWN";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_TRAINED_BASES: u8 = 1;

/// Upper bound on any length prefix; rejects garbage before allocating.
const MAX_LEN: u64 = 1 << 32;

impl<T: Scalar> ContextStore<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.push(self.precision.tag());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.architecture.len() as u32).to_le_bytes());
        out.extend_from_slice(self.architecture.as_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let flags = if self.trained_bases.is_some() {
            FLAG_TRAINED_BASES
        } else {
            0
        };
        out.push(flags);
        out.extend_from_slice(&(self.contexts.len() as u32).to_le_bytes());
        for ctx in self.contexts.values() {
            out.extend_from_slice(&ctx.task_id.to_le_bytes());
            out.extend_from_slice(&ctx.alpha.as_f64().to_le_bytes());
            out.extend_from_slice(&(ctx.vs.len() as u32).to_le_bytes());
            for v in &ctx.vs {
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                for x in v {
                    out.extend_from_slice(&x.as_f64().to_le_bytes());
                }
            }
        }
        if let Some(bases) = &self.trained_bases {
            out.extend_from_slice(&(bases.len() as u32).to_le_bytes());
            for b in bases {
                out.extend_from_slice(&(b.nrows() as u64).to_le_bytes());
                out.extend_from_slice(&(b.ncols() as u64).to_le_bytes());
                for x in b {
                    out.extend_from_slice(&x.as_f64().to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(format_err("not a checkpoint: bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint = r.u64()?;
        let tag = r.u8()?;
        let precision = Precision::from_tag(tag)
            .ok_or_else(|| format_err(format!("unknown precision tag {tag}")))?;
        let seed = r.u64()?;
        let arch_len = r.len32()?;
        let architecture = String::from_utf8(r.take(arch_len)?.to_vec())
            .map_err(|_| format_err("architecture description is not UTF-8"))?;
        let n_layers = r.len32()?;
        let mut layer_dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layer_dims.push(r.len64()?);
        }
        let flags = r.u8()?;
        let n_tasks = r.len32()?;
        let mut store = ContextStore::new(fingerprint, seed, architecture, layer_dims);
        store.precision = precision;
        for _ in 0..n_tasks {
            let task_id = r.u32()?;
            let alpha = T::of(r.f64()?);
            let n_vs = r.len32()?;
            let mut vs = Vec::with_capacity(n_vs);
            for _ in 0..n_vs {
                let len = r.len64()?;
                vs.push(Array1::from(r.reals::<T>(len)?));
            }
            if store.contexts.insert(task_id, TaskContext { task_id, alpha, vs }).is_some() {
                return Err(format_err(format!("task {task_id} stored twice")));
            }
        }
        if flags & FLAG_TRAINED_BASES != 0 {
            let n = r.len32()?;
            let mut bases = Vec::with_capacity(n);
            for _ in 0..n {
                let rows = r.len64()?;
                let cols = r.len64()?;
                let values = r.reals::<T>(rows.checked_mul(cols).ok_or_else(|| format_err("basis size overflow"))?)?;
                bases.push(
                    Array2::from_shape_vec((rows, cols), values)
                        .map_err(|e| format_err(e.to_string()))?,
                );
            }
            store.trained_bases = Some(bases);
        }
        if r.pos != bytes.len() {
            return Err(format_err(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
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
            .ok_or_else(|| format_err(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn len64(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(format_err(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| format_err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_checkpoint<T: Scalar>(store: &ContextStore<T>, path: &Path) -> Result<()> {
    write_atomic(path, &store.to_bytes())
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<ContextStore<T>> {
    ContextStore::from_bytes(&fs::read(path)?)
}

/// Inspection form of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointJson {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub precision: Precision,
    pub seed: u64,
    pub architecture: serde_json::Value,
    pub layer_dims: Vec<usize>,
    pub tasks: Vec<TaskJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trained_bases: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskJson {
    pub task_id: u32,
    pub alpha: f64,
    pub vs: Vec<Vec<f64>>,
}

impl<T: Scalar> ContextStore<T> {
    pub fn to_json(&self) -> CheckpointJson {
        CheckpointJson {
            format: "CRWN".into(),
            version: CHECKPOINT_VERSION,
            fingerprint: format!("{:016x}", self.fingerprint),
            precision: self.precision,
            seed: self.seed,
            architecture: serde_json::from_str(&self.architecture)
                .unwrap_or_else(|_| serde_json::Value::String(self.architecture.clone())),
            layer_dims: self.layer_dims.clone(),
            tasks: self
                .contexts
                .values()
                .map(|c| TaskJson {
                    task_id: c.task_id,
                    alpha: c.alpha.as_f64(),
                    vs: c.vs.iter().map(|v| v.iter().map(|x| x.as_f64()).collect()).collect(),
                })
                .collect(),
            trained_bases: self.trained_bases.as_ref().map(|bs| {
                bs.iter()
                    .map(|b| b.outer_iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
                    .collect()
            }),
        }
    }
}
