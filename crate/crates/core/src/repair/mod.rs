//! Repair operators and the per-layer repair pipeline.

pub mod ema;
pub mod fec;
pub mod pipeline;
pub mod retransmit;
pub mod robust;
pub mod subspace;
pub mod validate;

pub use ema::ema_fallback;
pub use fec::{fec_decode, fec_encode, Chunk, ChunkedUpdate, FecDecoded, FecGeometry, GroupStatus};
pub use pipeline::{repair_pipeline, LayerRepair, PipelineInput, RepairOutcome};
pub use retransmit::{request_retransmission, ChunkSource, RetransmissionBudget};
pub use robust::{robust_aggregate, RobustMethod};
pub use subspace::{lowrank_complete, subspace_fit, SubspaceModel};
pub use validate::validate;

use crate::error::{EmarError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepairConfig {
    /// Elements per FEC chunk.
    pub block_len: usize,
    /// Data chunks per parity group.
    pub group_size: usize,
    /// Subspace rank.
    pub rank: usize,
    /// History window capacity.
    pub history: usize,
    pub ema_beta: f64,
    /// Validation threshold on Delta.
    pub delta_val: f64,
    pub robust: RobustMethod,
    /// Above this corrupted fraction, with spatially uncorrelated damage, only
    /// retransmission is trusted.
    pub p_unrecoverable: f64,
    /// |tau| below this counts as uncorrelated for the rule above.
    pub tau_zero: f64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            block_len: 64,
            group_size: 8,
            rank: 10,
            history: 20,
            ema_beta: 0.8,
            delta_val: 0.02,
            robust: RobustMethod::Median,
            p_unrecoverable: 0.25,
            tau_zero: 0.2,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(EmarError::invalid(format!(
                "repair parameter `{what}` out of range"
            )))
        };
        if self.block_len == 0 {
            return bad("block_len");
        }
        if self.group_size < 2 {
            return bad("group_size");
        }
        if self.rank == 0 {
            return bad("rank");
        }
        if self.history < 2 {
            return bad("history");
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad("ema_beta");
        }
        if !(self.delta_val > 0.0) {
            return bad("delta_val");
        }
        if !(self.p_unrecoverable > 0.0 && self.p_unrecoverable <= 1.0) {
            return bad("p_unrecoverable");
        }
        if let RobustMethod::TrimmedMean { beta } = self.robust {
            if !(0.0..0.5).contains(&beta) {
                return bad("trim");
            }
        }
        Ok(())
    }
}

/// `||truth - repaired|| / ||truth||`, or the raw norm when `truth` is zero.
pub fn reconstruction_error(truth: &[f32], repaired: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&t, &r) in truth.iter().zip(repaired) {
        let e = t as f64 - r as f64;
        num += e * e;
        den += (t as f64) * (t as f64);
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}
