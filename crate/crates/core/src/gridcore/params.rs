use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::gridcore::Tensor;

/// Leading magic of every parameter checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MSCF1";

/// One trainable array with its gradient and optimizer velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        ParamEntry {
            value,
            grad,
            velocity,
        }
    }
}

/// Named parameters. Iteration order is lexicographic by name, which fixes
/// the order of every reduction over the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), ParamEntry::new(value));
    }

    /// Moves every entry of `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter entry `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter entry `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Adds `scale * g` into the gradient of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor, scale: f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("gradient for unknown parameter `{name}`")))?;
        if entry.grad.shape() != g.shape() {
            return Err(Error::dim("accumulate_grad", entry.grad.shape(), g.shape()));
        }
        for (a, b) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Writes values and velocities as an `MSCF1` stream with an arbitrary
    /// JSON metadata header.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, metadata: &serde_json::Value) -> Result<()> {
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        let meta = serde_json::to_vec(metadata)?;
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, entry) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            let shape = entry.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for t in [&entry.value, &entry.velocity] {
                for &x in t.data() {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`ParamStore::write_checkpoint`]. Gradients come back zeroed.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, expected MSCF1".into()));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let metadata: serde_json::Value = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let value = Tensor::new(&shape, read_f64s(&mut r, n)?)?;
            let velocity = Tensor::new(&shape, read_f64s(&mut r, n)?)?;
            let mut entry = ParamEntry::new(value);
            entry.velocity = velocity;
            store.entries.insert(name, entry);
        }
        Ok((store, metadata))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated stream: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
