//! Named-parameter container and its binary encoding.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"SMCK"
//! u32    format version (1)
//! u32    entry count
//! entry* u32 name length, UTF-8 name, u32 rank, u64 * rank dims, f64 * numel values
//! ```
//!
//! Entries are written in name order, so encoding is canonical and a
//! decode/encode cycle reproduces the input bytes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::numel;

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    /// Snapshot of every parameter of `m`.
    pub fn from_module(m: &dyn Module) -> Result<Checkpoint> {
        let mut entries = BTreeMap::new();
        let mut dup = None;
        m.visit_params("", &mut |name, t| {
            let e = Entry {
                shape: t.shape().to_vec(),
                values: t.to_vec(),
            };
            if entries.insert(String::from(name), e).is_some() {
                dup = Some(String::from(name));
            }
        });
        match dup {
            Some(name) => Err(Error::Checkpoint(format!("parameter name {name} registered twice"))),
            None => Ok(Checkpoint { entries }),
        }
    }

    /// Copies values into `m`. Names and shapes must match exactly.
    pub fn load_into(&self, m: &dyn Module) -> Result<()> {
        let mut seen = 0;
        let mut err = None;
        m.visit_params("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.entries.get(name) {
                None => err = Some(format!("missing parameter {name}")),
                Some(e) if e.shape != t.shape() => {
                    err = Some(format!("{name}: checkpoint shape {:?}, model shape {:?}", e.shape, t.shape()))
                }
                Some(e) => {
                    t.data_mut().copy_from_slice(&e.values);
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if seen != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} entries, model uses {seen}",
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = core::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if entries.insert(String::from(name), Entry { shape, values }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.values.len()).sum()
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

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Elementwise mean of checkpoints with identical names and shapes.
pub fn average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    let mut sums = first.clone();
    for (i, c) in checkpoints.iter().enumerate().skip(1) {
        if c.entries.len() != first.entries.len() {
            return Err(Error::Checkpoint(format!("checkpoint {i} has a different parameter set")));
        }
        for (name, e) in &c.entries {
            let acc = sums
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint {i} has extra parameter {name}")))?;
            if acc.shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} in checkpoint {i}, {:?} in checkpoint 0",
                    e.shape, acc.shape
                )));
            }
            for (a, v) in acc.values.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
    }
    let k = checkpoints.len() as f64;
    for e in sums.entries.values_mut() {
        e.values.iter_mut().for_each(|v| *v /= k);
    }
    Ok(sums)
}
