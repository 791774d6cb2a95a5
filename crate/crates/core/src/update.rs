//! Flattened model updates and the bookkeeping around them.

use std::collections::VecDeque;
use std::ops::Range;

use crate::error::{EmarError, Result};

/// Size in bytes of the canonical update header: `d: u32`, `round: u32`,
/// `client_id: u16`, all little-endian.
pub const UPDATE_HEADER_LEN: usize = 10;

/// A flattened parameter vector. Values are single-precision so that the
/// byte layout used by the chunk coder is canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub values: Vec<f32>,
    pub round: u32,
    pub client_id: u16,
}

impl ModelUpdate {
    pub fn new(values: Vec<f32>, round: u32, client_id: u16) -> Self {
        Self {
            values,
            round,
            client_id,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        crate::stats::l2_norm(&self.values)
    }

    /// Same header, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Self {
        Self {
            values,
            round: self.round,
            client_id: self.client_id,
        }
    }

    /// Canonical serialization: header followed by `d` little-endian `f32`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(UPDATE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < UPDATE_HEADER_LEN {
            return Err(EmarError::Protocol(format!(
                "update header needs {UPDATE_HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let d = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let round = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let client_id = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
        let body = &bytes[UPDATE_HEADER_LEN..];
        if body.len() != 4 * d {
            return Err(EmarError::Protocol(format!(
                "header announces {d} weights but body holds {} bytes",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            values,
            round,
            client_id,
        })
    }
}

/// Contiguous, ascending, non-empty index ranges covering `[0, d)` exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    ranges: Vec<Range<usize>>,
}

impl LayerPartition {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(EmarError::invalid(
                "layer partition needs at least one layer",
            ));
        }
        let mut ranges = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for (i, &size) in sizes.iter().enumerate() {
            if size == 0 {
                return Err(EmarError::invalid(format!("layer {i} is empty")));
            }
            ranges.push(start..start + size);
            start += size;
        }
        Ok(Self { ranges })
    }

    pub fn from_ranges(ranges: Vec<Range<usize>>) -> Result<Self> {
        let mut expected = 0;
        for (i, r) in ranges.iter().enumerate() {
            if r.start != expected {
                return Err(EmarError::invalid(format!(
                    "layer {i} starts at {} but the previous layer ended at {expected}",
                    r.start
                )));
            }
            if r.end <= r.start {
                return Err(EmarError::invalid(format!("layer {i} is empty")));
            }
            expected = r.end;
        }
        if ranges.is_empty() {
            return Err(EmarError::invalid(
                "layer partition needs at least one layer",
            ));
        }
        Ok(Self { ranges })
    }

    /// A single layer spanning the whole vector.
    pub fn single(d: usize) -> Result<Self> {
        Self::from_sizes(&[d])
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn num_layers(&self) -> usize {
        self.ranges.len()
    }

    pub fn dim(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    /// Layer that owns `index`, or `None` outside `[0, d)`.
    pub fn layer_of(&self, index: usize) -> Option<usize> {
        if index >= self.dim() {
            return None;
        }
        Some(self.ranges.partition_point(|r| r.end <= index))
    }
}

/// Concatenate layers into one update (round 0, client 0) plus its partition.
pub fn flatten(layers: &[Vec<f32>]) -> Result<(ModelUpdate, LayerPartition)> {
    if layers.is_empty() {
        return Err(EmarError::invalid("cannot flatten an empty layer list"));
    }
    let sizes: Vec<usize> = layers.iter().map(Vec::len).collect();
    let partition = LayerPartition::from_sizes(&sizes)?;
    let values = layers.concat();
    Ok((ModelUpdate::new(values, 0, 0), partition))
}

pub fn unflatten(update: &ModelUpdate, partition: &LayerPartition) -> Result<Vec<Vec<f32>>> {
    if update.dim() != partition.dim() {
        return Err(EmarError::DimensionMismatch {
            expected: partition.dim(),
            actual: update.dim(),
        });
    }
    Ok(partition
        .ranges()
        .iter()
        .map(|r| update.values[r.clone()].to_vec())
        .collect())
}

/// Clean/corrupted bipartition of `{0, ..., d-1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSets {
    clean: Vec<usize>,
    corrupted: Vec<usize>,
}

impl IndexSets {
    /// Everything clean.
    pub fn all_clean(d: usize) -> Self {
        Self {
            clean: (0..d).collect(),
            corrupted: Vec::new(),
        }
    }

    pub fn from_mask(corrupted_mask: &[bool]) -> Self {
        let mut clean = Vec::new();
        let mut corrupted = Vec::new();
        for (i, &bad) in corrupted_mask.iter().enumerate() {
            if bad {
                corrupted.push(i);
            } else {
                clean.push(i);
            }
        }
        Self { clean, corrupted }
    }

    /// Build from a list of corrupted indices; duplicates are merged.
    pub fn from_corrupted(d: usize, corrupted: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = vec![false; d];
        for i in corrupted {
            if i >= d {
                return Err(EmarError::invalid(format!("index {i} outside [0, {d})")));
            }
            mask[i] = true;
        }
        Ok(Self::from_mask(&mask))
    }

    pub fn clean(&self) -> &[usize] {
        &self.clean
    }

    pub fn corrupted(&self) -> &[usize] {
        &self.corrupted
    }

    pub fn dim(&self) -> usize {
        self.clean.len() + self.corrupted.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.dim()];
        for &i in &self.corrupted {
            mask[i] = true;
        }
        mask
    }

    /// Restriction to one layer, re-indexed from the layer start.
    pub fn restrict(&self, range: &Range<usize>) -> IndexSets {
        let mask = self.mask();
        Self::from_mask(&mask[range.clone()])
    }
}

/// Sliding FIFO window of accepted (post-repair) updates for one client.
#[derive(Debug, Clone)]
pub struct HistoryWindow {
    entries: VecDeque<Vec<f32>>,
    capacity: usize,
    dim: Option<usize>,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(EmarError::invalid("history capacity must be positive"));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            dim: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.entries.iter().map(Vec::as_slice)
    }

    pub fn latest(&self) -> Option<&[f32]> {
        self.entries.back().map(Vec::as_slice)
    }

    pub fn push(&mut self, update: &ModelUpdate) -> Result<()> {
        if let Some(d) = self.dim {
            if update.dim() != d {
                return Err(EmarError::DimensionMismatch {
                    expected: d,
                    actual: update.dim(),
                });
            }
        }
        self.dim = Some(update.dim());
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(update.values.clone());
        Ok(())
    }

    /// Coordinate-wise mean of the entries.
    pub fn mean(&self) -> Result<Vec<f64>> {
        let d = match (self.dim, self.entries.is_empty()) {
            (Some(d), false) => d,
            _ => return Err(EmarError::EmptyHistory),
        };
        let mut mu = vec![0.0f64; d];
        for entry in &self.entries {
            for (m, &v) in mu.iter_mut().zip(entry) {
                *m += v as f64;
            }
        }
        let k = self.entries.len() as f64;
        mu.iter_mut().for_each(|m| *m /= k);
        Ok(mu)
    }
}
