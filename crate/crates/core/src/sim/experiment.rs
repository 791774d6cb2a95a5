//! The round loop: train, transmit, repair at the fog, aggregate at the cloud.

use std::collections::BTreeSet;
use std::path::Path;

use super::cloud::cloud_round;
use super::fog::{fog_round, FogInput, FogOutput, FogSettings};
use super::metrics::{
    compute_metrics, ClientRecord, RoundRecord, Summary, CLIENTS_CSV_HEADER, ROUNDS_CSV_HEADER,
};
use super::task::SyntheticTask;
use super::train::client_local_train;
use super::transport::{add_link_noise, draw_corruption, transmit, ClientLink, Transmission};
use crate::config::{ExperimentConfig, RunManifest};
use crate::detection::DETECTION_CSV_HEADER;
use crate::error::{EmarError, Result};
use crate::privacy::dp::PRIVACY_CSV_HEADER;
use crate::privacy::{add_gaussian_noise, ClipParams, PrivacyLedger};
use crate::repair::{reconstruction_error, RetransmissionBudget};
use crate::report::write_csv;
use crate::rng::{stream_rng, Stream};
use crate::update::{HistoryWindow, LayerPartition, ModelUpdate};

/// Client id used for server-side random streams.
const SERVER: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub records: Vec<RoundRecord>,
    pub detection_rows: Vec<Vec<String>>,
    pub privacy_rows: Vec<Vec<String>>,
    /// Chunks re-sent by all client links over the run.
    pub retries: usize,
    pub global: Vec<f64>,
    pub ledger: PrivacyLedger,
}

impl ExperimentResult {
    pub fn summary(&self) -> Option<Summary> {
        compute_metrics(&self.records)
    }

    pub fn rounds_rows(&self) -> Vec<Vec<String>> {
        self.records.iter().map(RoundRecord::csv_row).collect()
    }

    /// Write rounds.csv, clients.csv, detection.csv, privacy.csv and
    /// manifest.txt into `dir`, creating it if needed.
    pub fn write_outputs(&self, dir: &Path, manifest: &RunManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| EmarError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_csv(
            &dir.join("rounds.csv"),
            &ROUNDS_CSV_HEADER,
            &self.rounds_rows(),
        )?;
        let clients: Vec<Vec<String>> = self
            .records
            .iter()
            .flat_map(RoundRecord::client_rows)
            .collect();
        write_csv(&dir.join("clients.csv"), &CLIENTS_CSV_HEADER, &clients)?;
        write_csv(
            &dir.join("detection.csv"),
            &DETECTION_CSV_HEADER,
            &self.detection_rows,
        )?;
        write_csv(
            &dir.join("privacy.csv"),
            &PRIVACY_CSV_HEADER,
            &self.privacy_rows,
        )?;
        let path = dir.join("manifest.txt");
        std::fs::write(&path, manifest.to_text()).map_err(|source| EmarError::Io { path, source })
    }
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn client_record(tx: &Transmission, out: &FogOutput, partition: &LayerPartition) -> ClientRecord {
    let geometry = tx.encoded.geometry;
    let corrupted: Vec<usize> = (0..geometry.num_data())
        .filter(|&c| {
            let r = geometry.value_range(c);
            !bits_equal(&tx.sent.values[r.clone()], &out.received.values[r])
        })
        .collect();
    let (output, mode, accepted, delta, requests) = match &out.outcome {
        Some(o) => (
            &o.repaired.values,
            Some(o.mode_used),
            o.accepted,
            o.delta,
            o.retransmit_requests.as_slice(),
        ),
        None => (&out.received.values, None, true, 0.0, &[][..]),
    };
    let resent: BTreeSet<usize> = requests.iter().copied().collect();
    let local = if accepted {
        corrupted.iter().filter(|c| !resent.contains(c)).count()
    } else {
        0
    };
    ClientRecord {
        client: out.client,
        kind: tx.kind(),
        mode,
        accepted,
        delta,
        reconstruction_error: reconstruction_error(&tx.sent.values, output),
        layer_errors: partition
            .ranges()
            .iter()
            .map(|r| reconstruction_error(&tx.sent.values[r.clone()], &output[r.clone()]))
            .collect(),
        corrupted_chunks: corrupted.len(),
        retransmitted_chunks: requests.len(),
        locally_repaired_chunks: local,
    }
}

/// Run `config.rounds` rounds. Deterministic in the config (including seed).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let seed = config.seed;
    let m = config.topology.clients;
    let task = SyntheticTask::generate(&config.task, m, seed)?;
    let partition = LayerPartition::from_sizes(&config.task.layers)?;
    let clip = ClipParams::new(config.train.clip_norm)?;
    let mut ledger = PrivacyLedger::new(
        config.privacy.sigma_cen,
        clip.clip_norm,
        config.privacy.delta,
    )?;
    let mut windows = vec![HistoryWindow::new(config.repair.history)?; m];
    let mut global = vec![0.0f64; task.d];
    let settings = FogSettings {
        partition: &partition,
        detection: &config.detection,
        repair: &config.repair,
        repair_enabled: config.repair_enabled,
    };
    let mut records = Vec::with_capacity(config.rounds as usize);
    let mut detection_rows = Vec::new();
    let mut privacy_rows = Vec::new();
    let mut retries = 0;

    for t in 1..=config.rounds {
        let mut txs = Vec::with_capacity(m);
        for i in 0..m {
            let client = i as u16;
            let mut rng = stream_rng(seed, i as u64, t as u64, Stream::Training);
            let mut delta = client_local_train(&global, &task, client, t, &config.train, &mut rng)?;
            if config.privacy.local_dp && config.privacy.local_sigma > 0.0 {
                let mut v: Vec<f64> = delta.iter().map(|&x| x as f64).collect();
                let mut rng = stream_rng(seed, i as u64, t as u64, Stream::LocalDp);
                add_gaussian_noise(
                    &mut v,
                    config.privacy.local_sigma * clip.clip_norm,
                    &mut rng,
                );
                delta = v.into_iter().map(|x| x as f32).collect();
            }
            let update = ModelUpdate::new(delta, t, client);
            let sent = add_link_noise(&update, config.topology.channel_noise_variance, seed);
            let spec = draw_corruption(&config.corruption, &sent, seed);
            txs.push(transmit(
                &sent,
                &spec,
                config.repair.block_len,
                config.repair.group_size,
                config.topology.loss_for(i),
                seed,
            )?);
        }

        let mut links = txs
            .iter()
            .enumerate()
            .map(|(i, tx)| ClientLink::new(&tx.encoded, config.topology.loss_for(i), seed))
            .collect::<Result<Vec<_>>>()?;
        let mut outputs: Vec<Option<FogOutput>> = vec![None; m];
        for fog in 0..config.topology.fogs {
            let mut budget = RetransmissionBudget::new(config.topology.retransmission_budget);
            let inputs: Vec<FogInput<'_>> = links
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| config.topology.fog_of(*i) == fog)
                .map(|(i, link)| FogInput {
                    client: i as u16,
                    geometry: txs[i].encoded.geometry,
                    received: &txs[i].received,
                    source: Some(link),
                })
                .collect();
            for out in fog_round(inputs, &mut windows, &settings, &mut budget)? {
                let slot = out.client as usize;
                outputs[slot] = Some(out);
            }
        }
        retries += links.iter().map(|l| l.retries).sum::<usize>();

        let mut clients = Vec::with_capacity(m);
        let mut accepted = Vec::new();
        for (tx, out) in txs.iter().zip(&outputs) {
            let out = out.as_ref().expect("every client belongs to a fog");
            clients.push(client_record(tx, out, &partition));
            if let Some(report) = &out.report {
                detection_rows.extend(report.csv_rows(t, out.client));
            }
            if let Some(f) = &out.forwarded {
                accepted.push(f.clone());
            }
        }

        let mut rng = stream_rng(seed, SERVER, t as u64, Stream::CentralDp);
        let next = cloud_round(&mut global, &accepted, &clip, &ledger, t, seed, &mut rng)?;
        let skipped = next.is_none();
        if let Some(next) = next {
            ledger = next;
        }
        privacy_rows.push(ledger.csv_row(t));
        let eval = task.evaluate(&global, t);
        records.push(RoundRecord {
            round: t,
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
            epsilon: ledger.epsilon,
            skipped,
            clients,
        });
    }

    Ok(ExperimentResult {
        config_hash: config.hash(),
        records,
        detection_rows,
        privacy_rows,
        retries,
        global,
        ledger,
    })
}
