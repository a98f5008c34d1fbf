//! Versioned binary checkpoints with a JSON sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MLNN" | u32 version | u8 precision | u16 len, digest | u64 step | u64 epoch
//! u32 params  × { u16 len, name | u8 trainable | u8 ndim | u64 dims… | values | velocities }
//! u32 stats   × { u16 len, name | u8 initialized | u64 channels | means | variances }
//! u64 body length | "NNLM"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::MetricsSeries;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Precision, Tensor};
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 4] = b"MLNN";
const TRAILER: &[u8; 4] = b"NNLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<T>,
    pub velocity: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsEntry<T> {
    pub name: String,
    pub initialized: bool,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub digest: String,
    pub step: u64,
    pub epoch: u64,
    pub params: Vec<ParamEntry<T>>,
    pub stats: Vec<StatsEntry<T>>,
}

/// Metadata written next to the binary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub precision: Precision,
    pub digest: String,
    pub step: u64,
    pub epoch: u64,
    pub config: ExperimentConfig,
    pub metrics: MetricsSeries,
}

/// `run/checkpoint.mlnn` → `run/checkpoint.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl<T: Element> Checkpoint<T> {
    pub fn capture(trainer: &Trainer<T>) -> Self {
        let store = &trainer.net.store;
        Checkpoint {
            digest: trainer.net.arch_digest(),
            step: trainer.step,
            epoch: trainer.epoch,
            params: store
                .params()
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    value: p.value.clone(),
                    velocity: p.velocity.clone(),
                })
                .collect(),
            stats: store
                .named_stats()
                .iter()
                .map(|s| StatsEntry {
                    name: s.name.clone(),
                    initialized: s.stats.initialized,
                    mean: s.stats.mean.clone(),
                    var: s.stats.var.clone(),
                })
                .collect(),
        }
    }

    /// Copies the saved state into `trainer`, whose architecture must match.
    pub fn restore_into(&self, trainer: &mut Trainer<T>) -> Result<()> {
        let digest = trainer.net.arch_digest();
        if digest != self.digest {
            return Err(Error::validation(
                "checkpoint",
                format!("architecture digest {} does not match the configured network {digest}", self.digest),
            ));
        }
        let store = &mut trainer.net.store;
        if store.params().len() != self.params.len() || store.named_stats().len() != self.stats.len() {
            return Err(Error::validation("checkpoint", "entry count does not match the network"));
        }
        for (p, e) in store.params_mut().iter_mut().zip(&self.params) {
            if p.name != e.name || p.value.shape() != e.value.shape() {
                return Err(Error::validation("checkpoint", format!("entry `{}` does not match `{}`", e.name, p.name)));
            }
            p.value = e.value.clone();
            p.velocity = e.velocity.clone();
            p.trainable = e.trainable;
            p.grad.fill(T::zero());
        }
        for (s, e) in store.named_stats_mut().iter_mut().zip(&self.stats) {
            if s.name != e.name || s.stats.mean.len() != e.mean.len() {
                return Err(Error::validation("checkpoint", format!("statistics `{}` do not match `{}`", e.name, s.name)));
            }
            s.stats.mean = e.mean.clone();
            s.stats.var = e.var.clone();
            s.stats.initialized = e.initialized;
        }
        trainer.step = self.step;
        trainer.epoch = self.epoch;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::PRECISION.tag());
        put_str(&mut out, &self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(p.trainable as u8);
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            p.value.data().iter().for_each(|v| v.write_le(&mut out));
            p.velocity.data().iter().for_each(|v| v.write_le(&mut out));
        }
        out.extend_from_slice(&(self.stats.len() as u32).to_le_bytes());
        for s in &self.stats {
            put_str(&mut out, &s.name);
            out.push(s.initialized as u8);
            out.extend_from_slice(&(s.mean.len() as u64).to_le_bytes());
            s.mean.iter().for_each(|v| v.write_le(&mut out));
            s.var.iter().for_each(|v| v.write_le(&mut out));
        }
        let body = out.len() as u64;
        out.extend_from_slice(&body.to_le_bytes());
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let header = read_header(bytes, path)?;
        if header.precision != T::PRECISION {
            return Err(Error::format(
                path,
                format!("checkpoint holds {} values, expected {}", header.precision, T::PRECISION),
            ));
        }
        let mut r = Reader {
            bytes: &bytes[..bytes.len() - 12],
            pos: header.body_start,
            path,
        };
        let size = T::PRECISION.element_size();
        let mut params = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let trainable = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.corrupt("shape overflows"))?;
            let value = r.values::<T>(n, size)?;
            let velocity = r.values::<T>(n, size)?;
            params.push(ParamEntry {
                name,
                trainable,
                value: Tensor::new(shape.clone(), value).map_err(|e| r.corrupt(&e.to_string()))?,
                velocity: Tensor::new(shape, velocity).map_err(|e| r.corrupt(&e.to_string()))?,
            });
        }
        let mut stats = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let initialized = r.u8()? != 0;
            let c = r.u64()? as usize;
            let mean = r.values::<T>(c, size)?;
            let var = r.values::<T>(c, size)?;
            stats.push(StatsEntry { name, initialized, mean, var });
        }
        if r.pos != r.bytes.len() {
            return Err(r.corrupt("trailing bytes before the footer"));
        }
        Ok(Checkpoint {
            digest: header.digest,
            step: header.step,
            epoch: header.epoch,
            params,
            stats,
        })
    }
}

/// Fixed-size header fields, readable without knowing the element type.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u32,
    pub precision: Precision,
    pub digest: String,
    pub step: u64,
    pub epoch: u64,
    body_start: usize,
}

fn read_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    if bytes.len() < 16 || &bytes[bytes.len() - 4..] != TRAILER {
        return Err(Error::format(path, "truncated checkpoint (missing footer)"));
    }
    let body = u64::from_le_bytes(bytes[bytes.len() - 12..bytes.len() - 4].try_into().unwrap());
    if body != (bytes.len() - 12) as u64 {
        return Err(Error::format(
            path,
            format!("length check failed: footer records {body} bytes, found {}", bytes.len() - 12),
        ));
    }
    let mut r = Reader {
        bytes: &bytes[..bytes.len() - 12],
        pos: 4,
        path,
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let tag = r.u8()?;
    let precision = Precision::from_tag(tag).ok_or_else(|| r.corrupt(&format!("unknown precision tag {tag}")))?;
    let digest = r.string()?;
    let step = r.u64()?;
    let epoch = r.u64()?;
    Ok(Header {
        version,
        precision,
        digest,
        step,
        epoch,
        body_start: r.pos,
    })
}

/// Reads only the header, e.g. to pick the element type before loading.
pub fn peek_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_header(&bytes, path)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn corrupt(&self, what: &str) -> Error {
        Error::format(self.path, format!("corrupt payload at byte {}: {what}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.corrupt("unexpected end"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let raw = self.take(n)?.to_vec();
        String::from_utf8(raw).map_err(|_| self.corrupt("name is not UTF-8"))
    }

    fn values<T: Element>(&mut self, n: usize, size: usize) -> Result<Vec<T>> {
        let len = n.checked_mul(size).ok_or_else(|| self.corrupt("length overflows"))?;
        Ok(self.take(len)?.chunks_exact(size).map(T::read_le).collect())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the binary checkpoint of `trainer` and its JSON sidecar.
pub fn save_checkpoint<T: Element>(path: &Path, trainer: &Trainer<T>, config: &ExperimentConfig, metrics: &MetricsSeries) -> Result<()> {
    let ckpt = Checkpoint::capture(trainer);
    write_atomic(path, &ckpt.to_bytes())?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        precision: T::PRECISION,
        digest: ckpt.digest,
        step: ckpt.step,
        epoch: ckpt.epoch,
        config: config.clone(),
        metrics: metrics.clone(),
    };
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    sidecar.config.validate()?;
    Ok(sidecar)
}
