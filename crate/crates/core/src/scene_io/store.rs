//! Per-Gaussian feature stores.
//!
//! File layout (`FST1`): magic, `u64` count, `u64` dim, `count × dim`
//! little-endian `f32` rows, then a `ceil(count/8)`-byte pruned bitmap
//! (bit `k % 8` of byte `k / 8`, least significant first).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FST1";

/// `N × D` per-Gaussian features plus a pruned flag per row. Pruned rows are
/// all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    count: usize,
    dim: usize,
    data: Vec<f32>,
    pruned: Vec<bool>,
}

impl FeatureStore {
    pub fn zeros(count: usize, dim: usize) -> Self {
        FeatureStore {
            count,
            dim,
            data: vec![0.0; count * dim],
            pruned: vec![false; count],
        }
    }

    /// Builds a store from row-major data; rows flagged pruned are zeroed.
    pub fn from_rows(count: usize, dim: usize, mut data: Vec<f32>, pruned: Vec<bool>) -> Result<Self> {
        if data.len() != count * dim || pruned.len() != count {
            return Err(Error::Dimension(format!(
                "store {count}x{dim} got {} values and {} flags",
                data.len(),
                pruned.len()
            )));
        }
        for (k, _) in pruned.iter().enumerate().filter(|(_, &p)| p) {
            data[k * dim..(k + 1) * dim].fill(0.0);
        }
        Ok(FeatureStore {
            count,
            dim,
            data,
            pruned,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn is_pruned(&self, k: usize) -> bool {
        self.pruned[k]
    }

    pub fn pruned_flags(&self) -> &[bool] {
        &self.pruned
    }

    pub fn pruned_count(&self) -> usize {
        self.pruned.iter().filter(|&&p| p).count()
    }

    /// Flags row `k` pruned and clears it.
    pub fn prune(&mut self, k: usize) {
        self.pruned[k] = true;
        self.row_mut(k).fill(0.0);
    }

    /// Rows in the listed order.
    pub fn select(&self, indices: &[usize]) -> FeatureStore {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &k in indices {
            data.extend_from_slice(self.row(k));
        }
        FeatureStore {
            count: indices.len(),
            dim: self.dim,
            data,
            pruned: indices.iter().map(|&k| self.pruned[k]).collect(),
        }
    }

    pub fn check_count(&self, expected: usize) -> Result<()> {
        if self.count != expected {
            return Err(Error::Dimension(format!(
                "feature store has {} rows but the cloud has {expected} Gaussians",
                self.count
            )));
        }
        Ok(())
    }
}

pub fn write_feature_store<W: Write>(store: &FeatureStore, mut w: W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.count as u64).to_le_bytes())?;
    w.write_all(&(store.dim as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(4 * store.dim);
    for k in 0..store.count {
        buf.clear();
        if store.pruned[k] {
            buf.resize(4 * store.dim, 0);
        } else {
            for v in store.row(k) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    let mut bitmap = vec![0u8; store.count.div_ceil(8)];
    for (k, _) in store.pruned.iter().enumerate().filter(|(_, &p)| p) {
        bitmap[k / 8] |= 1 << (k % 8);
    }
    w.write_all(&bitmap)?;
    w.flush()
}

/// Reads a store; `expected_count` checks it against a cloud size.
pub fn read_feature_store<R: Read>(mut r: R, expected_count: Option<usize>) -> Result<FeatureStore> {
    let perr = |m: String| Error::parse("feature store", m);
    let mut head = [0u8; 20];
    r.read_exact(&mut head).map_err(|_| perr("file too short for header".into()))?;
    if &head[..4] != MAGIC {
        return Err(perr("bad magic, expected \"FST1\"".into()));
    }
    let count = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    if let Some(n) = expected_count {
        if n != count {
            return Err(Error::Dimension(format!(
                "feature store has {count} rows but the cloud has {n} Gaussians"
            )));
        }
    }
    let total = count
        .checked_mul(dim)
        .ok_or_else(|| perr(format!("{count}x{dim} overflows")))?;
    let mut bytes = vec![0u8; 4 * total];
    r.read_exact(&mut bytes)
        .map_err(|_| perr("payload truncated".into()))?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(perr(format!("non-finite value at row {}, column {}", bad / dim.max(1), bad % dim.max(1))));
    }
    let mut bitmap = vec![0u8; count.div_ceil(8)];
    r.read_exact(&mut bitmap)
        .map_err(|_| perr("pruned bitmap truncated".into()))?;
    let pruned = (0..count).map(|k| bitmap[k / 8] & (1 << (k % 8)) != 0).collect();
    FeatureStore::from_rows(count, dim, data, pruned)
}

pub fn save_feature_store(store: &FeatureStore, path: &Path) -> Result<()> {
    write_feature_store(store, super::create(path)?).map_err(|e| Error::io(path, e))
}

pub fn load_feature_store(path: &Path, expected_count: Option<usize>) -> Result<FeatureStore> {
    read_feature_store(super::open(path)?, expected_count)
}
