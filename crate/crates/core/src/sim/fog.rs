//! Fog node: decode, detect, repair, validate and forward.

use crate::detection::{detect, DetectionConfig, DetectionReport};
use crate::error::{EmarError, Result};
use crate::repair::{
    fec_decode, repair_pipeline, Chunk, ChunkSource, FecDecoded, FecGeometry, PipelineInput,
    RepairConfig, RepairOutcome, RetransmissionBudget,
};
use crate::stats::median;
use crate::update::{HistoryWindow, LayerPartition, ModelUpdate};

/// The sign reference needs at least this many clients at the fog.
pub const MIN_SIGN_PEERS: usize = 3;

/// Coordinate-wise median of the updates one fog received this round; `None`
/// with fewer than [`MIN_SIGN_PEERS`] updates. A clean update agrees in sign
/// with its peers far more reliably than with its own previous round, whose
/// delta may have turned while the model moved.
pub fn peer_reference(updates: &[&[f32]]) -> Option<Vec<f32>> {
    let d = updates.first()?.len();
    if updates.len() < MIN_SIGN_PEERS || updates.iter().any(|u| u.len() != d) {
        return None;
    }
    let mut column = vec![0.0f64; updates.len()];
    Some(
        (0..d)
            .map(|j| {
                for (c, u) in column.iter_mut().zip(updates) {
                    *c = u[j] as f64;
                }
                median(&column).unwrap_or(0.0) as f32
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct FogSettings<'a> {
    pub partition: &'a LayerPartition,
    pub detection: &'a DetectionConfig,
    pub repair: &'a RepairConfig,
    /// With repair off the fog forwards the FEC-decoded update untouched.
    pub repair_enabled: bool,
}

pub struct FogInput<'a> {
    pub client: u16,
    pub geometry: FecGeometry,
    pub received: &'a [Option<Chunk>],
    pub source: Option<&'a mut dyn ChunkSource>,
}

#[derive(Debug, Clone)]
pub struct FogOutput {
    pub client: u16,
    pub decoded: FecDecoded,
    /// The update as received, unrecovered chunks zero-filled.
    pub received: ModelUpdate,
    pub report: Option<DetectionReport>,
    pub outcome: Option<RepairOutcome>,
    /// `None` when the repair was rejected.
    pub forwarded: Option<ModelUpdate>,
}

/// Process one client's chunks. Accepted repairs are pushed into `window`.
/// `peers` holds what the fog's other clients delivered this round; sign
/// flips are judged against the coordinate median of all of them.
pub fn fog_receive(
    input: FogInput<'_>,
    peers: &[&[f32]],
    window: &mut HistoryWindow,
    settings: &FogSettings<'_>,
    budget: &mut RetransmissionBudget,
) -> Result<FogOutput> {
    let decoded = fec_decode(&input.geometry, input.received)?;
    fog_process(input, decoded, peers, window, settings, budget)
}

fn fog_process(
    input: FogInput<'_>,
    decoded: FecDecoded,
    peers: &[&[f32]],
    window: &mut HistoryWindow,
    settings: &FogSettings<'_>,
    budget: &mut RetransmissionBudget,
) -> Result<FogOutput> {
    let received = decoded.to_update();
    if received.client_id != input.client {
        return Err(EmarError::Protocol(format!(
            "chunks of client {} arrived for client {}",
            received.client_id, input.client
        )));
    }
    if !settings.repair_enabled {
        return Ok(FogOutput {
            client: input.client,
            forwarded: Some(received.clone()),
            decoded,
            received,
            report: None,
            outcome: None,
        });
    }
    let known = (!decoded.is_complete()).then(|| {
        let mut mask = vec![false; received.dim()];
        for r in decoded.unrecovered_ranges() {
            mask[r].iter_mut().for_each(|m| *m = true);
        }
        mask
    });
    let mut everyone = vec![received.values.as_slice()];
    everyone.extend_from_slice(peers);
    let reference = peer_reference(&everyone);
    let report = detect(
        &received,
        settings.partition,
        reference.as_deref(),
        known.as_deref(),
        settings.detection,
    )?;
    let outcome = repair_pipeline(
        &PipelineInput {
            received: &received,
            partition: settings.partition,
            report: &report,
            window,
            peers,
            fec: Some(&decoded),
        },
        settings.repair,
        budget,
        input.source,
    )?;
    let forwarded = outcome.accepted.then(|| outcome.repaired.clone());
    if let Some(f) = &forwarded {
        window.push(f)?;
    }
    Ok(FogOutput {
        client: input.client,
        decoded,
        received,
        report: Some(report),
        outcome: Some(outcome),
        forwarded,
    })
}

/// Process every client of one fog in order, sharing the round's budget.
/// `windows` is indexed by client id.
pub fn fog_round(
    inputs: Vec<FogInput<'_>>,
    windows: &mut [HistoryWindow],
    settings: &FogSettings<'_>,
    budget: &mut RetransmissionBudget,
) -> Result<Vec<FogOutput>> {
    let decoded = inputs
        .iter()
        .map(|input| fec_decode(&input.geometry, input.received))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<Vec<f32>> = decoded.iter().map(|d| d.values.clone()).collect();
    inputs
        .into_iter()
        .zip(decoded)
        .enumerate()
        .map(|(i, (input, decoded))| {
            let window = windows.get_mut(input.client as usize).ok_or_else(|| {
                EmarError::invalid(format!("no history window for client {}", input.client))
            })?;
            let peers: Vec<&[f32]> = values
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != i)
                .map(|(_, v)| v.as_slice())
                .collect();
            fog_process(input, decoded, &peers, window, settings, budget)
        })
        .collect()
}
