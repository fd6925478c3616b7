//! Binary parameter snapshots tagged with the decoder config hash.
//!
//! Layout, little-endian: magic `DONUTCK1`, `u8` value width (4 or 8),
//! `u64` config hash, `u64` optimizer step, `u32` entry count, then per
//! entry `u32` name length, name bytes, `u32` rows, `u32` cols, values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DONUTCK1";
pub const MOMENT1: &str = "opt.m/";
pub const MOMENT2: &str = "opt.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    Magic,
    #[error("checkpoint config hash {found:016x} does not match {expected:016x}")]
    Hash { expected: u64, found: u64 },
    #[error("unsupported value width {0}")]
    Width(u8),
    #[error("checkpoint has no entry for parameter {0}")]
    Missing(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub entries: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes<T: Scalar>(&self) -> Vec<u8> {
        let width = std::mem::size_of::<T>() as u8;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.push(width);
        b.extend_from_slice(&self.config_hash.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rows as u32).to_le_bytes());
            b.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for &v in &t.data {
                if width == 4 {
                    b.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn from_bytes(mut r: &[u8]) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let width = take::<1>(&mut r)?[0];
        if width != 4 && width != 8 {
            return Err(CheckpointError::Width(width));
        }
        let config_hash = u64::from_le_bytes(take(&mut r)?);
        let step = u64::from_le_bytes(take(&mut r)?);
        let count = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut r)?) as usize;
            if r.len() < len {
                return Err(CheckpointError::Malformed("truncated name".into()));
            }
            let name = String::from_utf8(r[..len].to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            r = &r[len..];
            let rows = u32::from_le_bytes(take(&mut r)?) as usize;
            let cols = u32::from_le_bytes(take(&mut r)?) as usize;
            let n = rows * cols;
            if r.len() < n * width as usize {
                return Err(CheckpointError::Malformed(format!("truncated values for {name}")));
            }
            let data = (0..n)
                .map(|i| {
                    let o = i * width as usize;
                    if width == 4 {
                        f32::from_le_bytes(r[o..o + 4].try_into().unwrap()) as f64
                    } else {
                        f64::from_le_bytes(r[o..o + 8].try_into().unwrap())
                    }
                })
                .collect();
            r = &r[n * width as usize..];
            entries.push((name, Tensor::from_vec(rows, cols, data)));
        }
        if !r.is_empty() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            config_hash,
            step,
            entries,
        })
    }

    /// Writes via a temporary file so readers never see a partial snapshot.
    pub fn save<T: Scalar>(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes::<T>())?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn check_hash(&self, expected: u64) -> Result<(), CheckpointError> {
        if self.config_hash != expected {
            return Err(CheckpointError::Hash {
                expected,
                found: self.config_hash,
            });
        }
        Ok(())
    }

    /// Copies every parameter named in `store` out of the snapshot.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        restore_prefixed(self, store, "")
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], CheckpointError> {
    if r.len() < N {
        return Err(CheckpointError::Malformed("truncated header".into()));
    }
    let out = r[..N].try_into().unwrap();
    *r = &r[N..];
    Ok(out)
}

pub fn entries_of<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<(String, Tensor<f64>)> {
    store
        .iter()
        .map(|(_, p)| (format!("{prefix}{}", p.name), p.value.cast()))
        .collect()
}

/// Fills `store` from entries named `prefix + parameter name`.
pub fn restore_prefixed<T: Scalar>(ck: &Checkpoint, store: &mut ParamStore<T>, prefix: &str) -> Result<(), CheckpointError> {
    let names: Vec<(crate::params::ParamId, String)> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in names {
        let key = format!("{prefix}{name}");
        let t = ck.get(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
        let dst = store.value_mut(id);
        if t.shape() != dst.shape() {
            return Err(CheckpointError::Shape {
                name: key,
                expected: dst.shape(),
                found: t.shape(),
            });
        }
        *dst = t.cast();
    }
    Ok(())
}
