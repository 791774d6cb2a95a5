//! Experiment configuration: a flat `key = value` text format.
//!
//! ```text
//! # comments run to the end of the line
//! seed = 42
//! rounds = 50
//! topology.packet_loss = 0.02, 0.05, 0.05, 0.1, 0.15
//! repair.rank = 10
//! ```
//!
//! Keys are dotted (`section.name`); unknown and duplicate keys are errors and
//! `seed` is the only required key. [`ExperimentConfig::to_canonical_text`]
//! writes every key in sorted order, and its SHA-256 is the config hash.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::channel::CorruptionKind;
use crate::detection::DetectionConfig;
use crate::error::{EmarError, Result};
use crate::repair::{RepairConfig, RobustMethod};

pub const PACKET_LOSS_RANGE: (f64, f64) = (0.01, 0.15);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    LinearRegression,
    LogisticClassification,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LinearRegression => "linear",
            TaskKind::LogisticClassification => "logistic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyConfig {
    pub clients: usize,
    pub fogs: usize,
    /// One value for all clients, or one per client.
    pub packet_loss: Vec<f64>,
    pub allow_out_of_range_loss: bool,
    pub channel_noise_variance: f64,
    /// Chunks each fog may request per round.
    pub retransmission_budget: usize,
}

impl TopologyConfig {
    pub fn loss_for(&self, client: usize) -> f64 {
        if self.packet_loss.len() == 1 {
            self.packet_loss[0]
        } else {
            self.packet_loss[client]
        }
    }

    pub fn fog_of(&self, client: usize) -> usize {
        client % self.fogs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub layers: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise_std: f64,
    /// Std of the per-client feature mean shift.
    pub feature_shift: f64,
    /// Rank of the subspace the true weights drift in.
    pub drift_rank: usize,
    pub drift_scale: f64,
    /// Size of the client-specific offset inside the drift subspace,
    /// relative to the common drift.
    pub heterogeneity: f64,
    /// Rounds per period of the slowest drift component.
    pub drift_period: f64,
}

impl TaskConfig {
    pub fn dim(&self) -> usize {
        self.layers.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    /// Corruption level of every transmitted update (0 disables injection).
    pub rate: f64,
    /// Each update draws one kind uniformly from this list.
    pub types: Vec<CorruptionKind>,
    /// Random-noise std as a multiple of the update's robust scale.
    pub noise_scale: f64,
    /// Heavy-tail spike scale as a multiple of the robust scale.
    pub spike_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyConfig {
    pub sigma_cen: f64,
    pub delta: f64,
    pub local_dp: bool,
    pub local_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u32,
    pub output_dir: Option<PathBuf>,
    pub topology: TopologyConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub corruption: CorruptionConfig,
    pub detection: DetectionConfig,
    pub repair_enabled: bool,
    pub repair: RepairConfig,
    pub privacy: PrivacyConfig,
}

impl ExperimentConfig {
    /// All defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            rounds: 50,
            output_dir: None,
            topology: TopologyConfig {
                clients: 5,
                fogs: 1,
                packet_loss: vec![0.05],
                allow_out_of_range_loss: false,
                channel_noise_variance: 1e-4,
                retransmission_budget: 32,
            },
            task: TaskConfig {
                kind: TaskKind::LinearRegression,
                layers: vec![256, 256],
                train_samples: 1024,
                test_samples: 256,
                noise_std: 0.1,
                feature_shift: 0.05,
                drift_rank: 8,
                drift_scale: 3.0,
                heterogeneity: 0.05,
                drift_period: 80.0,
            },
            train: TrainConfig {
                epochs: 5,
                learning_rate: 1e-3,
                batch_size: 8,
                clip_norm: 1.5,
            },
            corruption: CorruptionConfig {
                rate: 0.10,
                types: CorruptionKind::INJECTED.to_vec(),
                noise_scale: 20.0,
                spike_scale: 10.0,
            },
            detection: DetectionConfig::default(),
            repair_enabled: true,
            repair: RepairConfig::default(),
            privacy: PrivacyConfig {
                sigma_cen: 0.0,
                delta: 1e-5,
                local_dp: false,
                local_sigma: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.topology;
        if t.clients == 0 || t.clients > u16::MAX as usize {
            return Err(EmarError::config(
                "topology.clients",
                "must be in [1, 65535]",
            ));
        }
        if t.fogs == 0 || t.fogs > t.clients {
            return Err(EmarError::config(
                "topology.fogs",
                "must be in [1, clients]",
            ));
        }
        if t.packet_loss.len() != 1 && t.packet_loss.len() != t.clients {
            return Err(EmarError::config(
                "topology.packet_loss",
                format!(
                    "expected 1 or {} values, got {}",
                    t.clients,
                    t.packet_loss.len()
                ),
            ));
        }
        for &l in &t.packet_loss {
            let (lo, hi) = if t.allow_out_of_range_loss {
                (0.0, 1.0)
            } else {
                PACKET_LOSS_RANGE
            };
            if !(lo..=hi).contains(&l) {
                return Err(EmarError::config(
                    "topology.packet_loss",
                    format!("{l} outside [{lo}, {hi}] (set topology.allow_out_of_range_loss to override)"),
                ));
            }
        }
        if !(t.channel_noise_variance >= 0.0 && t.channel_noise_variance.is_finite()) {
            return Err(EmarError::config(
                "topology.channel_noise_variance",
                "must be finite and >= 0",
            ));
        }
        let k = &self.task;
        if k.layers.is_empty() || k.layers.contains(&0) {
            return Err(EmarError::config(
                "task.layers",
                "needs at least one non-empty layer",
            ));
        }
        if k.dim() > u32::MAX as usize {
            return Err(EmarError::config(
                "task.layers",
                "dimension does not fit in 32 bits",
            ));
        }
        if k.train_samples == 0 {
            return Err(EmarError::config("task.train_samples", "must be positive"));
        }
        if k.test_samples == 0 {
            return Err(EmarError::config("task.test_samples", "must be positive"));
        }
        let nonneg = [
            ("task.noise_std", k.noise_std),
            ("task.feature_shift", k.feature_shift),
            ("task.drift_scale", k.drift_scale),
            ("task.heterogeneity", k.heterogeneity),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(EmarError::config(key, "must be finite and >= 0"));
            }
        }
        if k.drift_rank == 0 || k.drift_rank > k.dim() {
            return Err(EmarError::config("task.drift_rank", "must be in [1, d]"));
        }
        if !(k.drift_period > 0.0) {
            return Err(EmarError::config("task.drift_period", "must be positive"));
        }
        let tr = &self.train;
        if tr.epochs == 0 {
            return Err(EmarError::config("train.epochs", "must be at least 1"));
        }
        if !(tr.learning_rate > 0.0 && tr.learning_rate.is_finite()) {
            return Err(EmarError::config("train.learning_rate", "must be positive"));
        }
        if tr.batch_size == 0 {
            return Err(EmarError::config("train.batch_size", "must be positive"));
        }
        if !(tr.clip_norm > 0.0 && tr.clip_norm.is_finite()) {
            return Err(EmarError::config("train.clip_norm", "must be positive"));
        }
        let c = &self.corruption;
        if !(0.0..=1.0).contains(&c.rate) {
            return Err(EmarError::config("corruption.rate", "must be in [0, 1]"));
        }
        if c.types.is_empty() || c.types.contains(&CorruptionKind::None) {
            return Err(EmarError::config(
                "corruption.types",
                "needs at least one injected kind",
            ));
        }
        if !(c.noise_scale > 0.0) {
            return Err(EmarError::config(
                "corruption.noise_scale",
                "must be positive",
            ));
        }
        if !(c.spike_scale > 0.0) {
            return Err(EmarError::config(
                "corruption.spike_scale",
                "must be positive",
            ));
        }
        self.detection
            .validate()
            .map_err(|e| EmarError::config("detection", e.to_string()))?;
        self.repair
            .validate()
            .map_err(|e| EmarError::config("repair", e.to_string()))?;
        if self.repair.rank > self.repair.history {
            return Err(EmarError::config(
                "repair.rank",
                "must not exceed repair.history",
            ));
        }
        let p = &self.privacy;
        if !(p.sigma_cen >= 0.0 && p.sigma_cen.is_finite()) {
            return Err(EmarError::config(
                "privacy.sigma_cen",
                "must be finite and >= 0",
            ));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return Err(EmarError::config("privacy.delta", "must be in (0, 1)"));
        }
        if !(p.local_sigma >= 0.0 && p.local_sigma.is_finite()) {
            return Err(EmarError::config(
                "privacy.local_sigma",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }

    /// Every key with its value, sorted by key.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        fn list<T: Display>(v: &[T]) -> String {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        }
        let (method, trim, krum_f) = match self.repair.robust {
            RobustMethod::Median => ("median", 0.2, None),
            RobustMethod::TrimmedMean { beta } => ("trimmed_mean", beta, None),
            RobustMethod::Krum { f } => ("krum", 0.2, f),
        };
        let d = &self.detection;
        let r = &self.repair;
        let mut m = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("rounds", self.rounds.to_string());
        if let Some(dir) = &self.output_dir {
            m.insert("output_dir", dir.display().to_string());
        }
        m.insert("topology.clients", self.topology.clients.to_string());
        m.insert("topology.fogs", self.topology.fogs.to_string());
        m.insert("topology.packet_loss", list(&self.topology.packet_loss));
        m.insert(
            "topology.allow_out_of_range_loss",
            self.topology.allow_out_of_range_loss.to_string(),
        );
        m.insert(
            "topology.channel_noise_variance",
            self.topology.channel_noise_variance.to_string(),
        );
        m.insert(
            "topology.retransmission_budget",
            self.topology.retransmission_budget.to_string(),
        );
        m.insert("task.kind", self.task.kind.name().to_string());
        m.insert("task.layers", list(&self.task.layers));
        m.insert("task.train_samples", self.task.train_samples.to_string());
        m.insert("task.test_samples", self.task.test_samples.to_string());
        m.insert("task.noise_std", self.task.noise_std.to_string());
        m.insert("task.feature_shift", self.task.feature_shift.to_string());
        m.insert("task.drift_rank", self.task.drift_rank.to_string());
        m.insert("task.drift_scale", self.task.drift_scale.to_string());
        m.insert("task.heterogeneity", self.task.heterogeneity.to_string());
        m.insert("task.drift_period", self.task.drift_period.to_string());
        m.insert("train.epochs", self.train.epochs.to_string());
        m.insert("train.learning_rate", self.train.learning_rate.to_string());
        m.insert("train.batch_size", self.train.batch_size.to_string());
        m.insert("train.clip_norm", self.train.clip_norm.to_string());
        m.insert("corruption.rate", self.corruption.rate.to_string());
        m.insert(
            "corruption.types",
            self.corruption
                .types
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        m.insert(
            "corruption.noise_scale",
            self.corruption.noise_scale.to_string(),
        );
        m.insert(
            "corruption.spike_scale",
            self.corruption.spike_scale.to_string(),
        );
        m.insert("detection.eta", d.eta.to_string());
        m.insert("detection.p_fec", d.p_fec.to_string());
        m.insert("detection.tau_lowrank", d.tau_lowrank.to_string());
        m.insert("detection.tau_zero", d.tau_zero.to_string());
        m.insert("detection.gamma_thr", d.gamma_thr.to_string());
        m.insert("detection.flip_fraction", d.flip_fraction.to_string());
        m.insert("detection.flip_tolerance", d.flip_tolerance.to_string());
        m.insert("detection.flip_min_magnitude", d.flip_min_magnitude.to_string());
        m.insert("detection.min_run", d.min_run.to_string());
        m.insert("detection.block_gap", d.block_gap.to_string());
        m.insert("repair.enabled", self.repair_enabled.to_string());
        m.insert("repair.block_len", r.block_len.to_string());
        m.insert("repair.group_size", r.group_size.to_string());
        m.insert("repair.rank", r.rank.to_string());
        m.insert("repair.history", r.history.to_string());
        m.insert("repair.ema_beta", r.ema_beta.to_string());
        m.insert("repair.delta_val", r.delta_val.to_string());
        m.insert("repair.robust_method", method.to_string());
        m.insert("repair.trim", trim.to_string());
        if let Some(f) = krum_f {
            m.insert("repair.krum_f", f.to_string());
        }
        m.insert("repair.p_unrecoverable", r.p_unrecoverable.to_string());
        m.insert("privacy.sigma_cen", self.privacy.sigma_cen.to_string());
        m.insert("privacy.delta", self.privacy.delta.to_string());
        m.insert("privacy.local_dp", self.privacy.local_dp.to_string());
        m.insert("privacy.local_sigma", self.privacy.local_sigma.to_string());
        m
    }

    pub fn to_canonical_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_text().as_bytes()))
    }
}

/// Every key the parser accepts.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "rounds",
    "output_dir",
    "topology.clients",
    "topology.fogs",
    "topology.packet_loss",
    "topology.allow_out_of_range_loss",
    "topology.channel_noise_variance",
    "topology.retransmission_budget",
    "task.kind",
    "task.layers",
    "task.train_samples",
    "task.test_samples",
    "task.noise_std",
    "task.feature_shift",
    "task.drift_rank",
    "task.drift_scale",
    "task.heterogeneity",
    "task.drift_period",
    "train.epochs",
    "train.learning_rate",
    "train.batch_size",
    "train.clip_norm",
    "corruption.rate",
    "corruption.types",
    "corruption.noise_scale",
    "corruption.spike_scale",
    "detection.eta",
    "detection.p_fec",
    "detection.tau_lowrank",
    "detection.tau_zero",
    "detection.gamma_thr",
    "detection.flip_fraction",
    "detection.flip_tolerance",
    "detection.flip_min_magnitude",
    "detection.min_run",
    "detection.block_gap",
    "repair.enabled",
    "repair.block_len",
    "repair.group_size",
    "repair.rank",
    "repair.history",
    "repair.ema_beta",
    "repair.delta_val",
    "repair.robust_method",
    "repair.trim",
    "repair.krum_f",
    "repair.p_unrecoverable",
    "privacy.sigma_cen",
    "privacy.delta",
    "privacy.local_dp",
    "privacy.local_sigma",
];

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.0.remove(key) {
            *target = raw
                .parse()
                .map_err(|e| EmarError::config(key, format!("cannot parse `{raw}`: {e}")))?;
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str, target: &mut Vec<T>) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(raw) = self.0.remove(key) {
            *target = raw
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    s.parse()
                        .map_err(|e| EmarError::config(key, format!("cannot parse `{s}`: {e}")))
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }
}

/// Parse and validate a config text; every omitted key takes its default.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(EmarError::config(
                format!("line {}", n + 1),
                "expected `key = value`",
            ));
        };
        let (key, value) = (key.trim(), value.trim());
        if !KNOWN_KEYS.contains(&key) {
            return Err(EmarError::config(key, "unknown key"));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(EmarError::config(key, "duplicate key"));
        }
    }
    let mut f = Fields(map);
    let seed_raw = f
        .take_raw("seed")
        .ok_or_else(|| EmarError::config("seed", "required key is missing"))?;
    let seed: u64 = seed_raw
        .parse()
        .map_err(|e| EmarError::config("seed", format!("cannot parse `{seed_raw}`: {e}")))?;
    let mut c = ExperimentConfig::with_seed(seed);
    f.take("rounds", &mut c.rounds)?;
    if let Some(dir) = f.take_raw("output_dir") {
        c.output_dir = Some(PathBuf::from(dir));
    }
    f.take("topology.clients", &mut c.topology.clients)?;
    f.take("topology.fogs", &mut c.topology.fogs)?;
    f.take_list("topology.packet_loss", &mut c.topology.packet_loss)?;
    f.take(
        "topology.allow_out_of_range_loss",
        &mut c.topology.allow_out_of_range_loss,
    )?;
    f.take(
        "topology.channel_noise_variance",
        &mut c.topology.channel_noise_variance,
    )?;
    f.take(
        "topology.retransmission_budget",
        &mut c.topology.retransmission_budget,
    )?;
    if let Some(kind) = f.take_raw("task.kind") {
        c.task.kind = match kind.as_str() {
            "linear" => TaskKind::LinearRegression,
            "logistic" => TaskKind::LogisticClassification,
            other => {
                return Err(EmarError::config(
                    "task.kind",
                    format!("`{other}` is not linear or logistic"),
                ))
            }
        };
    }
    f.take_list("task.layers", &mut c.task.layers)?;
    f.take("task.train_samples", &mut c.task.train_samples)?;
    f.take("task.test_samples", &mut c.task.test_samples)?;
    f.take("task.noise_std", &mut c.task.noise_std)?;
    f.take("task.feature_shift", &mut c.task.feature_shift)?;
    f.take("task.drift_rank", &mut c.task.drift_rank)?;
    f.take("task.drift_scale", &mut c.task.drift_scale)?;
    f.take("task.heterogeneity", &mut c.task.heterogeneity)?;
    f.take("task.drift_period", &mut c.task.drift_period)?;
    f.take("train.epochs", &mut c.train.epochs)?;
    f.take("train.learning_rate", &mut c.train.learning_rate)?;
    f.take("train.batch_size", &mut c.train.batch_size)?;
    f.take("train.clip_norm", &mut c.train.clip_norm)?;
    f.take("corruption.rate", &mut c.corruption.rate)?;
    if let Some(raw) = f.take_raw("corruption.types") {
        c.corruption.types = raw
            .split(',')
            .map(|s| {
                CorruptionKind::from_name(s.trim()).ok_or_else(|| {
                    EmarError::config("corruption.types", format!("unknown kind `{}`", s.trim()))
                })
            })
            .collect::<Result<_>>()?;
    }
    f.take("corruption.noise_scale", &mut c.corruption.noise_scale)?;
    f.take("corruption.spike_scale", &mut c.corruption.spike_scale)?;
    f.take("detection.eta", &mut c.detection.eta)?;
    f.take("detection.p_fec", &mut c.detection.p_fec)?;
    f.take("detection.tau_lowrank", &mut c.detection.tau_lowrank)?;
    f.take("detection.tau_zero", &mut c.detection.tau_zero)?;
    f.take("detection.gamma_thr", &mut c.detection.gamma_thr)?;
    f.take("detection.flip_fraction", &mut c.detection.flip_fraction)?;
    f.take("detection.flip_tolerance", &mut c.detection.flip_tolerance)?;
    f.take("detection.flip_min_magnitude", &mut c.detection.flip_min_magnitude)?;
    f.take("detection.min_run", &mut c.detection.min_run)?;
    f.take("detection.block_gap", &mut c.detection.block_gap)?;
    f.take("repair.enabled", &mut c.repair_enabled)?;
    f.take("repair.block_len", &mut c.repair.block_len)?;
    f.take("repair.group_size", &mut c.repair.group_size)?;
    f.take("repair.rank", &mut c.repair.rank)?;
    f.take("repair.history", &mut c.repair.history)?;
    f.take("repair.ema_beta", &mut c.repair.ema_beta)?;
    f.take("repair.delta_val", &mut c.repair.delta_val)?;
    f.take("repair.p_unrecoverable", &mut c.repair.p_unrecoverable)?;
    let mut trim = 0.2f64;
    f.take("repair.trim", &mut trim)?;
    let krum_f = match f.take_raw("repair.krum_f") {
        Some(raw) => Some(raw.parse::<usize>().map_err(|e| {
            EmarError::config("repair.krum_f", format!("cannot parse `{raw}`: {e}"))
        })?),
        None => None,
    };
    let method = f
        .take_raw("repair.robust_method")
        .unwrap_or_else(|| "median".into());
    c.repair.robust = match method.as_str() {
        "median" => RobustMethod::Median,
        "trimmed_mean" => RobustMethod::TrimmedMean { beta: trim },
        "krum" => RobustMethod::Krum { f: krum_f },
        other => {
            return Err(EmarError::config(
                "repair.robust_method",
                format!("`{other}` is not median, trimmed_mean or krum"),
            ))
        }
    };
    f.take("privacy.sigma_cen", &mut c.privacy.sigma_cen)?;
    f.take("privacy.delta", &mut c.privacy.delta)?;
    f.take("privacy.local_dp", &mut c.privacy.local_dp)?;
    f.take("privacy.local_sigma", &mut c.privacy.local_sigma)?;
    debug_assert!(f.0.is_empty(), "unconsumed keys: {:?}", f.0.keys());
    c.validate()?;
    Ok(c)
}

/// Provenance written next to every run's CSV output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub start_timestamp: u64,
    pub seed: u64,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        let start_timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            config_hash: config.hash(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            start_timestamp,
            seed: config.seed,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "config_hash = {}\ntool_version = {}\nstart_timestamp = {}\nseed = {}\n",
            self.config_hash, self.tool_version, self.start_timestamp, self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse_config("seed = 7\n").unwrap();
        assert_eq!(c, ExperimentConfig::with_seed(7));
        assert_eq!(c.topology.clients, 5);
        assert_eq!(c.rounds, 50);
        assert_eq!(c.repair.rank, 10);
        assert_eq!(c.repair.delta_val, 0.02);
        assert_eq!(c.train.clip_norm, 1.5);
    }

    #[test]
    fn packet_loss_range_is_enforced() {
        let err = parse_config("seed = 1\ntopology.packet_loss = 0.5\n").unwrap_err();
        assert!(matches!(err, EmarError::Config { ref key, .. } if key == "topology.packet_loss"));
        let ok = parse_config(
            "seed = 1\ntopology.packet_loss = 0.5\ntopology.allow_out_of_range_loss = true\n",
        );
        assert!(ok.is_ok());
        let per_client =
            parse_config("seed = 1\ntopology.packet_loss = 0.01, 0.02, 0.05, 0.1, 0.15\n").unwrap();
        assert_eq!(per_client.topology.loss_for(4), 0.15);
        assert!(parse_config("seed = 1\ntopology.packet_loss = 0.01, 0.02\n").is_err());
    }

    #[test]
    fn rejects_unknown_duplicate_and_missing() {
        assert!(
            matches!(parse_config("seed = 1\nbogus = 2\n"), Err(EmarError::Config { key, .. }) if key == "bogus")
        );
        assert!(parse_config("seed = 1\nseed = 2\n").is_err());
        assert!(
            matches!(parse_config("rounds = 3\n"), Err(EmarError::Config { key, .. }) if key == "seed")
        );
        assert!(parse_config("seed = 1\nrounds\n").is_err());
        assert!(parse_config("seed = x\n").is_err());
        assert!(parse_config("seed = 1\ncorruption.types = random,plague\n").is_err());
        assert!(parse_config("seed = 1\nrepair.rank = 30\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = parse_config("# header\n\nseed = 3 # trailing\n  rounds=4\n").unwrap();
        assert_eq!((c.seed, c.rounds), (3, 4));
    }

    #[test]
    fn canonical_round_trip() {
        let text = "seed = 11\nrounds = 7\ntask.layers = 64, 32\nrepair.robust_method = krum\nrepair.krum_f = 1\n\
                    corruption.types = burst,missing\nprivacy.sigma_cen = 1.25\noutput_dir = out/x\n";
        let c = parse_config(text).unwrap();
        let again = parse_config(&c.to_canonical_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.repair.robust, RobustMethod::Krum { f: Some(1) });
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse_config("seed = 1\n").unwrap();
        let b = parse_config("# same content\nseed=1").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = parse_config("seed = 2\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn every_known_key_is_serialized() {
        let mut c = ExperimentConfig::with_seed(1);
        c.output_dir = Some("o".into());
        c.repair.robust = RobustMethod::Krum { f: Some(1) };
        let pairs = c.to_pairs();
        for key in KNOWN_KEYS {
            assert!(pairs.contains_key(key), "{key}");
        }
    }

    #[test]
    fn manifest_text() {
        let c = ExperimentConfig::with_seed(5);
        let m = RunManifest::new(&c);
        assert!(m.to_text().contains(&c.hash()));
        assert!(m.to_text().contains("seed = 5"));
    }
}
