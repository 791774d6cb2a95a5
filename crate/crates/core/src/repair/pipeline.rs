//! Mode-selected repair with validation and fallback, one layer at a time.
//!
//! Each layer starts with the mode chosen by the detector and, while the
//! candidate fails validation (or the mode cannot run), moves down the chain
//! low-rank -> robust -> EMA -> retransmission, never trying a mode twice.
//! Local modes are skipped for layers whose corrupted share exceeds
//! `p_unrecoverable` with spatially uncorrelated damage. The update is
//! accepted when every layer is.

use std::collections::BTreeSet;
use std::ops::Range;

use super::ema::ema_fill;
use super::fec::{FecDecoded, FecGeometry};
use super::retransmit::{request_retransmission, ChunkSource, RetransmissionBudget};
use super::robust::aggregate_rows;
use super::subspace::{SubspaceModel, RESIDUAL_ETA};
use super::validate::validate;
use super::{reconstruction_error, RepairConfig};
use crate::detection::{DetectionReport, RepairMode};
use crate::error::{EmarError, Result};
use crate::update::{HistoryWindow, IndexSets, LayerPartition, ModelUpdate};

const FALLBACK: [RepairMode; 4] = [
    RepairMode::LowRankCompletion,
    RepairMode::RobustAggregation,
    RepairMode::EmaFallback,
    RepairMode::Retransmission,
];

pub struct PipelineInput<'a> {
    /// The received (FEC-decoded) update.
    pub received: &'a ModelUpdate,
    pub partition: &'a LayerPartition,
    pub report: &'a DetectionReport,
    /// The client's accepted history.
    pub window: &'a HistoryWindow,
    /// Updates other clients delivered in the same round. Robust aggregation
    /// draws on these when there are at least two, and on `window` otherwise.
    pub peers: &'a [&'a [f32]],
    /// Decoder state; required for FEC verification and for mapping
    /// coordinates to chunk ids.
    pub fec: Option<&'a FecDecoded>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRepair {
    pub layer: usize,
    /// The accepted mode, or the last mode attempted when none succeeded.
    pub mode: RepairMode,
    pub attempted: Vec<RepairMode>,
    pub delta: f64,
    pub accepted: bool,
    /// Corrupted coordinates when the layer entered the pipeline.
    pub corrupted: usize,
}

#[derive(Debug, Clone)]
pub struct RepairOutcome {
    pub repaired: ModelUpdate,
    /// Most invasive mode over the layers.
    pub mode_used: RepairMode,
    /// Largest per-layer Delta.
    pub delta: f64,
    pub accepted: bool,
    /// Every chunk id sent to the retransmission channel.
    pub retransmit_requests: Vec<usize>,
    pub layers: Vec<LayerRepair>,
    /// Set by callers that know the ground truth.
    pub reconstruction_error: Option<f64>,
}

impl RepairOutcome {
    pub fn retransmitted(&self) -> usize {
        self.retransmit_requests.len()
    }

    pub fn set_reference(&mut self, truth: &[f32]) {
        self.reconstruction_error = Some(reconstruction_error(truth, &self.repaired.values));
    }
}

enum Attempt {
    /// Candidate to validate.
    Candidate(Vec<f32>),
    /// Candidate accepted without validation (complete re-receipt).
    Confirmed(Vec<f32>),
    Failed,
}

struct LayerCtx<'a> {
    input: &'a PipelineInput<'a>,
    cfg: &'a RepairConfig,
    geometry: FecGeometry,
    range: Range<usize>,
    global_suspects: &'a BTreeSet<usize>,
}

/// Mutable state shared by the retransmission attempts of all layers.
struct Link<'a, 's> {
    budget: &'a mut RetransmissionBudget,
    source: Option<&'a mut (dyn ChunkSource + 's)>,
    requests: Vec<usize>,
}

fn history_rows<'a>(window: &'a HistoryWindow, range: &Range<usize>) -> Vec<&'a [f32]> {
    window.entries().map(|e| &e[range.clone()]).collect()
}

fn fill(values: &[f32], sets: &IndexSets, source: &[f32]) -> Vec<f32> {
    let mut out = values.to_vec();
    for &j in sets.corrupted() {
        out[j] = source[j];
    }
    out
}

impl LayerCtx<'_> {
    fn suspect_chunks(&self, sets: &IndexSets) -> BTreeSet<usize> {
        sets.corrupted()
            .iter()
            .map(|&j| self.geometry.chunk_of_index(self.range.start + j))
            .collect()
    }

    fn attempt(
        &self,
        mode: RepairMode,
        current: &mut [f32],
        sets: &mut IndexSets,
        link: &mut Link<'_, '_>,
    ) -> Attempt {
        match mode {
            RepairMode::Fec => self.fec(current, sets),
            RepairMode::LowRankCompletion => {
                let rows = history_rows(self.input.window, &self.range);
                let fitted = SubspaceModel::fit(&rows, self.cfg.rank).and_then(|m| {
                    let refined = m.refine(current, sets, RESIDUAL_ETA)?;
                    let filled = m.complete(current, &refined)?;
                    Ok((refined, filled))
                });
                match fitted {
                    Ok((refined, filled)) => {
                        *sets = refined;
                        Attempt::Candidate(filled)
                    }
                    Err(_) => Attempt::Failed,
                }
            }
            RepairMode::RobustAggregation => {
                let rows = if self.input.peers.len() >= 2 {
                    self.input.peers.iter().map(|p| &p[self.range.clone()]).collect()
                } else {
                    history_rows(self.input.window, &self.range)
                };
                if rows.is_empty() {
                    return Attempt::Failed;
                }
                match aggregate_rows(&rows, self.cfg.robust) {
                    Ok(agg) => Attempt::Candidate(fill(current, sets, &agg)),
                    Err(_) => Attempt::Failed,
                }
            }
            RepairMode::EmaFallback => {
                let rows = history_rows(self.input.window, &self.range);
                match ema_fill(current, sets, &rows, self.cfg.ema_beta) {
                    Ok(c) => Attempt::Candidate(c),
                    Err(_) => Attempt::Failed,
                }
            }
            RepairMode::Retransmission => self.retransmit(current, sets, link),
        }
    }

    /// Clear suspect chunks whose group checks out against parity, or
    /// rebuild a lone suspect chunk from parity.
    fn fec(&self, current: &[f32], sets: &IndexSets) -> Attempt {
        let Some(fec) = self.input.fec else {
            return Attempt::Failed;
        };
        let mut candidate = current.to_vec();
        for c in self.suspect_chunks(sets) {
            let g = self.geometry.group_of(c);
            if fec.group_verifies(g) {
                continue;
            }
            let group_suspects = self
                .geometry
                .group_members(g)
                .filter(|m| self.global_suspects.contains(m))
                .count();
            if group_suspects != 1 {
                return Attempt::Failed;
            }
            let Some(rebuilt) = fec.rebuild_from_parity(c) else {
                return Attempt::Failed;
            };
            let chunk_range = self.geometry.value_range(c);
            for (k, idx) in chunk_range.enumerate() {
                if self.range.contains(&idx) {
                    candidate[idx - self.range.start] = rebuilt[k];
                }
            }
        }
        Attempt::Candidate(candidate)
    }

    /// Re-request every chunk touching the corrupted set. Whatever arrives
    /// is written into `current` and removed from the corrupted set, even
    /// when the retransmission is incomplete.
    fn retransmit(
        &self,
        current: &mut [f32],
        sets: &mut IndexSets,
        link: &mut Link<'_, '_>,
    ) -> Attempt {
        let Some(source) = link.source.as_deref_mut() else {
            return Attempt::Failed;
        };
        let ids: Vec<usize> = self.suspect_chunks(sets).into_iter().collect();
        let result = request_retransmission(&ids, link.budget, source);
        link.requests.extend(&result.sent);
        let mut mask = sets.mask();
        for chunk in &result.received {
            let c = chunk.index();
            if self.geometry.is_parity(c) {
                continue;
            }
            let floats = chunk.floats();
            for (k, idx) in self.geometry.value_range(c).enumerate() {
                if self.range.contains(&idx) {
                    current[idx - self.range.start] = floats[k];
                    mask[idx - self.range.start] = false;
                }
            }
        }
        *sets = IndexSets::from_mask(&mask);
        if sets.corrupted().is_empty() {
            Attempt::Confirmed(current.to_vec())
        } else {
            Attempt::Failed
        }
    }
}

/// Repair every layer of `input.received`. `source` enables retransmission;
/// re-sent chunks are charged to `budget`.
pub fn repair_pipeline(
    input: &PipelineInput<'_>,
    cfg: &RepairConfig,
    budget: &mut RetransmissionBudget,
    source: Option<&mut dyn ChunkSource>,
) -> Result<RepairOutcome> {
    let d = input.received.dim();
    if input.partition.dim() != d || input.report.index_sets.dim() != d {
        return Err(EmarError::DimensionMismatch {
            expected: d,
            actual: input.partition.dim(),
        });
    }
    if input.report.layers.len() != input.partition.num_layers() {
        return Err(EmarError::invalid(
            "detection report does not match the layer partition",
        ));
    }
    let geometry = match input.fec {
        Some(f) => f.geometry,
        None => FecGeometry::new(d, cfg.block_len, cfg.group_size.max(2))?,
    };
    let global_suspects: BTreeSet<usize> = input
        .report
        .index_sets
        .corrupted()
        .iter()
        .map(|&j| geometry.chunk_of_index(j))
        .collect();

    let mut repaired = input.received.values.clone();
    let mut link = Link {
        budget,
        source,
        requests: Vec::new(),
    };
    let mut layers = Vec::with_capacity(input.partition.num_layers());
    for (l, range) in input.partition.ranges().iter().enumerate() {
        let layer_report = &input.report.layers[l];
        let mut current = input.received.values[range.clone()].to_vec();
        let mut sets = layer_report.index_sets.clone();
        let corrupted = sets.corrupted().len();
        if corrupted == 0 {
            layers.push(LayerRepair {
                layer: l,
                mode: RepairMode::Fec,
                attempted: vec![RepairMode::Fec],
                delta: 0.0,
                accepted: true,
                corrupted,
            });
            continue;
        }
        let primary = layer_report.mode;
        let chain: Vec<RepairMode> = std::iter::once(primary)
            .chain(FALLBACK.into_iter().filter(|&m| m != primary))
            .collect();
        let ctx = LayerCtx {
            input,
            cfg,
            geometry,
            range: range.clone(),
            global_suspects: &global_suspects,
        };
        let mut attempted = Vec::new();
        let mut outcome: Option<(RepairMode, f64, Vec<f32>)> = None;
        let mut last_delta = f64::INFINITY;
        for mode in chain {
            let local = matches!(
                mode,
                RepairMode::LowRankCompletion
                    | RepairMode::RobustAggregation
                    | RepairMode::EmaFallback
            );
            let share = sets.corrupted().len() as f64 / range.len() as f64;
            if local && share > cfg.p_unrecoverable && layer_report.tau.abs() < cfg.tau_zero {
                continue;
            }
            attempted.push(mode);
            match ctx.attempt(mode, &mut current, &mut sets, &mut link) {
                Attempt::Confirmed(c) => {
                    outcome = Some((mode, 0.0, c));
                    break;
                }
                Attempt::Candidate(c) => {
                    let (delta, ok) = validate(&c, &current, &sets, cfg.delta_val);
                    if ok {
                        outcome = Some((mode, delta, c));
                        break;
                    }
                    last_delta = delta;
                }
                Attempt::Failed => {}
            }
        }
        let layer_repair = match outcome {
            Some((mode, delta, values)) => {
                repaired[range.clone()].copy_from_slice(&values);
                LayerRepair {
                    layer: l,
                    mode,
                    attempted,
                    delta,
                    accepted: true,
                    corrupted,
                }
            }
            None => {
                repaired[range.clone()].copy_from_slice(&current);
                LayerRepair {
                    layer: l,
                    mode: attempted.last().copied().unwrap_or(primary),
                    attempted,
                    delta: last_delta,
                    accepted: false,
                    corrupted,
                }
            }
        };
        layers.push(layer_repair);
    }

    let accepted = layers.iter().all(|l| l.accepted);
    let mode_used = layers
        .iter()
        .map(|l| l.mode)
        .max_by_key(|m| m.severity())
        .unwrap_or(RepairMode::Fec);
    let delta = layers.iter().map(|l| l.delta).fold(0.0, f64::max);
    Ok(RepairOutcome {
        repaired: input.received.with_values(repaired),
        mode_used,
        delta,
        accepted,
        retransmit_requests: link.requests,
        layers,
        reconstruction_error: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::inject_random_noise;
    use crate::detection::{detect, DetectionConfig};
    use crate::repair::fec::{fec_decode, fec_encode, Chunk, ChunkedUpdate};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    const D: usize = 512;

    /// Uniform weights: no natural 3-sigma outliers to muddy the suspects.
    fn uniform(seed: u64) -> ModelUpdate {
        let mut rng = rng_from_seed(seed);
        ModelUpdate::new((0..D).map(|_| rng.random_range(-1.0f32..1.0)).collect(), 1, 0)
    }

    /// Re-sends chunks of the clean encoding.
    struct Clean(ChunkedUpdate);

    impl ChunkSource for Clean {
        fn resend(&mut self, ids: &[usize]) -> Vec<Option<Chunk>> {
            ids.iter().map(|&c| Some(self.0.chunks[c].clone())).collect()
        }
    }

    struct Case {
        clean: ModelUpdate,
        encoded: ChunkedUpdate,
        decoded: FecDecoded,
        partition: LayerPartition,
        report: DetectionReport,
    }

    /// `corrupt` edits the data values; parity stays that of the clean data.
    fn case(seed: u64, corrupt: impl FnOnce(&mut [f32])) -> Case {
        let clean = uniform(seed);
        let encoded = fec_encode(&clean, 64, 8).unwrap();
        let mut values = clean.values.clone();
        corrupt(&mut values);
        let sent = encoded.with_data_values(&values).unwrap();
        let received: Vec<_> = sent.chunks.into_iter().map(Some).collect();
        let decoded = fec_decode(&encoded.geometry, &received).unwrap();
        let partition = LayerPartition::from_sizes(&[256, 256]).unwrap();
        let report = detect(
            &decoded.to_update(),
            &partition,
            None,
            None,
            &DetectionConfig::default(),
        )
        .unwrap();
        Case {
            clean,
            encoded,
            decoded,
            partition,
            report,
        }
    }

    fn run(
        c: &Case,
        window: &HistoryWindow,
        peers: &[&[f32]],
        budget: &mut RetransmissionBudget,
        source: Option<&mut dyn ChunkSource>,
    ) -> RepairOutcome {
        let received = c.decoded.to_update();
        repair_pipeline(
            &PipelineInput {
                received: &received,
                partition: &c.partition,
                report: &c.report,
                window,
                peers,
                fec: Some(&c.decoded),
            },
            &RepairConfig::default(),
            budget,
            source,
        )
        .unwrap()
    }

    fn empty() -> HistoryWindow {
        HistoryWindow::new(20).unwrap()
    }

    #[test]
    fn clean_update_passes_through() {
        let c = case(1, |_| {});
        let out = run(&c, &empty(), &[], &mut RetransmissionBudget::new(0), None);
        assert!(out.accepted);
        assert_eq!(out.mode_used, RepairMode::Fec);
        assert_eq!(out.delta, 0.0);
        assert_eq!(out.repaired.values, c.clean.values);
        assert!(out.retransmit_requests.is_empty());
    }

    #[test]
    fn lone_suspect_chunk_is_rebuilt_from_parity() {
        // Large spikes in chunk 2 only: flagged, and alone in group 0.
        let c = case(2, |v| {
            for j in (128..192).step_by(8) {
                v[j] += 50.0;
            }
        });
        assert_eq!(c.report.layers[0].mode, RepairMode::Fec);
        let out = run(&c, &empty(), &[], &mut RetransmissionBudget::new(0), None);
        assert!(out.accepted);
        assert_eq!(out.mode_used, RepairMode::Fec);
        assert_eq!(out.repaired.values, c.clean.values);
    }

    #[test]
    fn dense_damage_needs_retransmission() {
        let c = case(3, |v| {
            let w = ModelUpdate::new(v[..256].to_vec(), 1, 0);
            let (noisy, _) = inject_random_noise(&w, 0.35, 20.0, 9).unwrap();
            v[..256].copy_from_slice(&noisy.values);
        });
        let layer = &c.report.layers[0];
        assert!(layer.p_b > 0.25 && layer.tau.abs() < 0.2);

        // No budget: every local mode is ruled out and the update is rejected.
        let mut dry = RetransmissionBudget::new(0);
        let rejected = run(&c, &empty(), &[], &mut dry, Some(&mut Clean(c.encoded.clone())));
        assert!(!rejected.accepted);
        assert!(!rejected.layers[0].attempted.contains(&RepairMode::LowRankCompletion));

        let mut budget = RetransmissionBudget::new(32);
        let out = run(&c, &empty(), &[], &mut budget, Some(&mut Clean(c.encoded.clone())));
        assert!(out.accepted);
        assert_eq!(out.mode_used, RepairMode::Retransmission);
        assert_eq!(out.repaired.values, c.clean.values);
        assert_eq!(out.retransmit_requests, (0..4).collect::<Vec<_>>());
        assert_eq!((budget.used, budget.remaining), (4, 28));
    }

    #[test]
    fn partial_retransmission_is_not_accepted() {
        let c = case(4, |v| {
            let w = ModelUpdate::new(v[..256].to_vec(), 1, 0);
            let (noisy, _) = inject_random_noise(&w, 0.35, 20.0, 9).unwrap();
            v[..256].copy_from_slice(&noisy.values);
        });
        let mut budget = RetransmissionBudget::new(2);
        let out = run(&c, &empty(), &[], &mut budget, Some(&mut Clean(c.encoded.clone())));
        assert!(!out.accepted);
        assert_eq!(out.retransmitted(), 2);
        // What did arrive is kept.
        assert_eq!(out.repaired.values[..128], c.clean.values[..128]);
    }

    #[test]
    fn without_history_a_burst_falls_back_to_peers() {
        let c = case(5, |v| {
            for x in &mut v[300..340] {
                *x = 9.0;
            }
        });
        assert_eq!(c.report.layers[1].mode, RepairMode::LowRankCompletion);
        let peers: Vec<Vec<f32>> = (0..3)
            .map(|k| c.clean.values.iter().map(|x| x + 0.001 * k as f32).collect())
            .collect();
        let refs: Vec<&[f32]> = peers.iter().map(Vec::as_slice).collect();
        let out = run(&c, &empty(), &refs, &mut RetransmissionBudget::new(0), None);
        assert!(out.accepted);
        assert_eq!(out.layers[0].mode, RepairMode::Fec);
        assert_eq!(
            out.layers[1].attempted,
            vec![RepairMode::LowRankCompletion, RepairMode::RobustAggregation]
        );
        assert_eq!(out.mode_used, RepairMode::RobustAggregation);
        let err = reconstruction_error(&c.clean.values, &out.repaired.values);
        assert!(err < 0.01, "{err}");
    }

    #[test]
    fn mismatched_report_is_an_error() {
        let c = case(6, |_| {});
        let received = c.decoded.to_update();
        let other = LayerPartition::from_sizes(&[512]).unwrap();
        let res = repair_pipeline(
            &PipelineInput {
                received: &received,
                partition: &other,
                report: &c.report,
                window: &empty(),
                peers: &[],
                fec: Some(&c.decoded),
            },
            &RepairConfig::default(),
            &mut RetransmissionBudget::new(0),
            None,
        );
        assert!(res.is_err());
    }
}
