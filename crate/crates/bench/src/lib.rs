//! Workload fixtures for the benchmarks.
//!
//! Values come straight from SplitMix64 so the fixtures need nothing beyond
//! the core crate and stay identical from run to run.

use emar_core::channel::inject;
use emar_core::rng::splitmix64;
use emar_core::{CorruptionSpec, IndexSets, LayerPartition, ModelUpdate};

/// Uniform values in `[-scale, scale)`.
pub fn uniform(n: usize, scale: f32, seed: u64) -> Vec<f32> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = splitmix64(state);
            let unit = (state >> 40) as f32 / (1u64 << 24) as f32;
            scale * (2.0 * unit - 1.0)
        })
        .collect()
}

/// `k` history rows plus one fresh row, all drawn from the same random
/// rank-`r` subspace with a little isotropic noise.
pub fn low_rank_rows(d: usize, r: usize, k: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<f32>) {
    let basis: Vec<Vec<f32>> = (0..r).map(|c| uniform(d, 1.0, seed ^ (c as u64 + 1))).collect();
    let row = |i: u64| {
        let coeffs = uniform(r, 1.0, splitmix64(seed.wrapping_add(1000 + i)));
        let noise = uniform(d, 1e-3, splitmix64(seed.wrapping_add(5000 + i)));
        (0..d)
            .map(|j| noise[j] + basis.iter().zip(&coeffs).map(|(b, a)| b[j] * a).sum::<f32>())
            .collect::<Vec<f32>>()
    };
    let history = (0..k as u64).map(row).collect();
    (history, row(k as u64))
}

/// A fresh update hit by a burst, with everything a repair step needs.
pub struct BurstWorkload {
    pub history: Vec<Vec<f32>>,
    pub truth: ModelUpdate,
    pub received: ModelUpdate,
    pub sets: IndexSets,
    pub partition: LayerPartition,
}

impl BurstWorkload {
    pub fn new(layers: &[usize], rank: usize, history_len: usize, burst_len: usize) -> Self {
        let partition = LayerPartition::from_sizes(layers).expect("layer sizes");
        let d = partition.dim();
        let (history, fresh) = low_rank_rows(d, rank, history_len, 7);
        let truth = ModelUpdate::new(fresh, 1, 0);
        let (received, mask) =
            inject(&truth, &CorruptionSpec::burst(burst_len, 11)).expect("burst fits");
        let sets = IndexSets::from_corrupted(d, mask.corrupted_indices).expect("indices in range");
        Self {
            history,
            truth,
            received,
            sets,
            partition,
        }
    }

    pub fn history_rows(&self) -> Vec<&[f32]> {
        self.history.iter().map(Vec::as_slice).collect()
    }
}
