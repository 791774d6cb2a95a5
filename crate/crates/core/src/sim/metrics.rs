//! Per-round records and the run summary.

use std::collections::BTreeMap;

use crate::channel::CorruptionKind;
use crate::detection::RepairMode;
use crate::report::fmt_f64;
use crate::stats::{mean, sample_variance};

/// Rounds over which convergence variance is measured.
pub const VARIANCE_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub client: u16,
    pub kind: CorruptionKind,
    /// `None` when repair is off.
    pub mode: Option<RepairMode>,
    pub accepted: bool,
    pub delta: f64,
    /// Reconstruction error of the fog's output against what the client sent.
    pub reconstruction_error: f64,
    pub layer_errors: Vec<f64>,
    /// Data chunks whose decoded content differs from what was sent.
    pub corrupted_chunks: usize,
    pub retransmitted_chunks: usize,
    /// Corrupted chunks of an accepted update that were not re-sent.
    pub locally_repaired_chunks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub epsilon: f64,
    /// No update was accepted; the global model did not move.
    pub skipped: bool,
    pub clients: Vec<ClientRecord>,
}

impl RoundRecord {
    pub fn accepted(&self) -> usize {
        self.clients.iter().filter(|c| c.accepted).count()
    }

    pub fn rejected(&self) -> usize {
        self.clients.len() - self.accepted()
    }

    pub fn corrupted_chunks(&self) -> usize {
        self.clients.iter().map(|c| c.corrupted_chunks).sum()
    }

    pub fn retransmitted_chunks(&self) -> usize {
        self.clients.iter().map(|c| c.retransmitted_chunks).sum()
    }

    pub fn locally_repaired_chunks(&self) -> usize {
        self.clients.iter().map(|c| c.locally_repaired_chunks).sum()
    }

    pub fn mean_reconstruction_error(&self) -> f64 {
        let v: Vec<f64> = self
            .clients
            .iter()
            .map(|c| c.reconstruction_error)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            mean(&v)
        }
    }

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.round.to_string(),
            fmt_f64(self.test_loss),
            fmt_f64(self.test_accuracy),
            fmt_f64(self.epsilon),
            self.accepted().to_string(),
            self.rejected().to_string(),
            u8::from(self.skipped).to_string(),
            self.corrupted_chunks().to_string(),
            self.retransmitted_chunks().to_string(),
            self.locally_repaired_chunks().to_string(),
            fmt_f64(self.mean_reconstruction_error()),
        ]
    }

    pub fn client_rows(&self) -> Vec<Vec<String>> {
        self.clients
            .iter()
            .map(|c| {
                vec![
                    self.round.to_string(),
                    c.client.to_string(),
                    c.kind.name().to_string(),
                    c.mode.map_or("off", RepairMode::name).to_string(),
                    u8::from(c.accepted).to_string(),
                    fmt_f64(c.delta),
                    fmt_f64(c.reconstruction_error),
                    c.corrupted_chunks.to_string(),
                    c.retransmitted_chunks.to_string(),
                    c.locally_repaired_chunks.to_string(),
                ]
            })
            .collect()
    }
}

pub const ROUNDS_CSV_HEADER: [&str; 11] = [
    "round",
    "test_loss",
    "test_accuracy",
    "epsilon",
    "accepted",
    "rejected",
    "skipped",
    "corrupted_chunks",
    "retransmitted_chunks",
    "locally_repaired_chunks",
    "mean_re",
];

pub const CLIENTS_CSV_HEADER: [&str; 10] = [
    "round",
    "client",
    "corruption",
    "mode",
    "accepted",
    "delta",
    "re",
    "corrupted_chunks",
    "retransmitted_chunks",
    "locally_repaired_chunks",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rounds: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
    /// Sample variance of the test loss over the last 20 rounds (or all
    /// rounds when fewer); `None` with fewer than two rounds.
    pub convergence_variance: Option<f64>,
    /// Mean per-layer reconstruction error by injected corruption kind.
    pub re_by_kind: BTreeMap<CorruptionKind, f64>,
    pub corrupted_chunks: usize,
    pub retransmitted_chunks: usize,
    pub locally_repaired_chunks: usize,
    /// Re-sent chunks over the chunks a retransmit-everything scheme would
    /// re-send (every corrupted chunk); 0 when nothing was corrupted.
    pub retransmission_ratio: f64,
    pub repair_attempts: usize,
    pub repair_accepted: usize,
    /// Accepted over attempted repairs; 1 when nothing was attempted.
    pub repair_success_rate: f64,
    /// Locally repaired over corrupted chunks; 1 when nothing was corrupted.
    pub locally_repaired_fraction: f64,
}

impl Summary {
    /// Convergence variance of this run relative to a baseline run.
    pub fn variance_ratio(&self, baseline: &Summary) -> Option<f64> {
        match (self.convergence_variance, baseline.convergence_variance) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        }
    }
}

/// Returns `None` for an empty record list.
pub fn compute_metrics(records: &[RoundRecord]) -> Option<Summary> {
    let last = records.last()?;
    let tail = &records[records.len().saturating_sub(VARIANCE_WINDOW)..];
    let losses: Vec<f64> = tail.iter().map(|r| r.test_loss).collect();
    let mut by_kind: BTreeMap<CorruptionKind, Vec<f64>> = BTreeMap::new();
    let (mut attempts, mut accepted) = (0, 0);
    for c in records.iter().flat_map(|r| &r.clients) {
        by_kind.entry(c.kind).or_default().extend(&c.layer_errors);
        if c.mode.is_some() {
            attempts += 1;
            accepted += usize::from(c.accepted);
        }
    }
    let corrupted: usize = records.iter().map(RoundRecord::corrupted_chunks).sum();
    let retransmitted: usize = records.iter().map(RoundRecord::retransmitted_chunks).sum();
    let local: usize = records
        .iter()
        .map(RoundRecord::locally_repaired_chunks)
        .sum();
    let ratio = |num: usize, den: usize, empty: f64| {
        if den == 0 {
            empty
        } else {
            num as f64 / den as f64
        }
    };
    Some(Summary {
        rounds: records.len(),
        final_loss: last.test_loss,
        final_accuracy: last.test_accuracy,
        convergence_variance: sample_variance(&losses),
        re_by_kind: by_kind
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k, mean(&v)))
            .collect(),
        corrupted_chunks: corrupted,
        retransmitted_chunks: retransmitted,
        locally_repaired_chunks: local,
        retransmission_ratio: ratio(retransmitted, corrupted, 0.0),
        repair_attempts: attempts,
        repair_accepted: accepted,
        repair_success_rate: ratio(accepted, attempts, 1.0),
        locally_repaired_fraction: ratio(local, corrupted, 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(
        kind: CorruptionKind,
        re: f64,
        accepted: bool,
        corrupted: usize,
        resent: usize,
    ) -> ClientRecord {
        ClientRecord {
            client: 0,
            kind,
            mode: Some(RepairMode::Fec),
            accepted,
            delta: 0.0,
            reconstruction_error: re,
            layer_errors: vec![re, re],
            corrupted_chunks: corrupted,
            retransmitted_chunks: resent,
            locally_repaired_chunks: if accepted {
                corrupted.saturating_sub(resent)
            } else {
                0
            },
        }
    }

    fn record(round: u32, loss: f64, clients: Vec<ClientRecord>) -> RoundRecord {
        RoundRecord {
            round,
            test_loss: loss,
            test_accuracy: 1.0 - loss,
            epsilon: 0.0,
            skipped: false,
            clients,
        }
    }

    #[test]
    fn perfect_repair_has_zero_error() {
        let recs: Vec<_> = (1..=3)
            .map(|t| record(t, 0.1, vec![client(CorruptionKind::Burst, 0.0, true, 2, 0)]))
            .collect();
        let s = compute_metrics(&recs).unwrap();
        assert_eq!(s.re_by_kind[&CorruptionKind::Burst], 0.0);
        assert_eq!(s.locally_repaired_fraction, 1.0);
        assert!(s.convergence_variance.unwrap() < 1e-30);
    }

    #[test]
    fn clean_run_ratios() {
        let recs: Vec<_> = (1..=4)
            .map(|t| {
                record(
                    t,
                    0.5 / t as f64,
                    vec![client(CorruptionKind::None, 0.0, true, 0, 0)],
                )
            })
            .collect();
        let s = compute_metrics(&recs).unwrap();
        assert_eq!(s.retransmission_ratio, 0.0);
        assert_eq!(s.repair_success_rate, 1.0);
        assert_eq!(s.final_loss, 0.125);
    }

    #[test]
    fn counts_and_window() {
        let mut recs = Vec::new();
        for t in 1..=30u32 {
            let loss = if t <= 10 { 100.0 } else { f64::from(t % 2) };
            recs.push(record(
                t,
                loss,
                vec![
                    client(CorruptionKind::RandomNoise, 0.2, true, 8, 8),
                    client(CorruptionKind::Burst, 0.1, t % 3 != 0, 2, 0),
                ],
            ));
        }
        let s = compute_metrics(&recs).unwrap();
        // Last 20 losses alternate 1, 0.
        let oracle = 20.0 * 0.25 / 19.0;
        assert!((s.convergence_variance.unwrap() - oracle).abs() < 1e-12);
        assert_eq!(s.corrupted_chunks, 300);
        assert_eq!(s.retransmitted_chunks, 240);
        assert_eq!(s.repair_attempts, 60);
        assert_eq!(s.repair_accepted, 50);
        assert_eq!(s.locally_repaired_chunks, 40);
        assert!((s.re_by_kind[&CorruptionKind::RandomNoise] - 0.2).abs() < 1e-12);
        assert!(compute_metrics(&[]).is_none());
    }

    #[test]
    fn csv_rows_match_headers() {
        let r = record(1, 0.5, vec![client(CorruptionKind::Burst, 0.1, true, 2, 1)]);
        assert_eq!(r.csv_row().len(), ROUNDS_CSV_HEADER.len());
        assert_eq!(r.client_rows()[0].len(), CLIENTS_CSV_HEADER.len());
    }
}
