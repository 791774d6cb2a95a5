//! Per-layer corruption indicators and repair-mode classification.
//!
//! For every layer the detector computes a robust location/scale, the
//! fraction of entries outside `m +/- eta*sigma` (p_b), the lag-1
//! autocorrelation of that outlier mask (tau), the kurtosis of the layer
//! (gamma) and of the flagged deviations, runs of identical values, and sign
//! flips against the client's previous accepted update. These indicators pick
//! one of five repair modes.
//!
//! Rules, first match wins:
//!
//! 1. tau > tau_lowrank, or a missing run exists -> low-rank completion
//! 2. sign flips above `flip_fraction * |layer|` -> robust aggregation
//! 3. gamma > gamma_thr and the flagged deviations are themselves
//!    heavy-tailed -> robust aggregation
//! 4. p_b < p_fec -> FEC
//! 5. p_b > p_fec and |tau| < tau_zero -> retransmission
//! 6. otherwise -> EMA fallback
//!
//! Structure is tested before kurtosis because a uniform burst or a zeroed
//! block raises the layer kurtosis on its own.

use std::fmt;
use std::ops::Range;

use crate::error::{EmarError, Result};
use crate::stats::{mad, median, population_kurtosis, robust_scale_or_rms, MAD_TO_SIGMA};
use crate::update::{IndexSets, LayerPartition, ModelUpdate};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConfig {
    /// Outlier multiplier.
    pub eta: f64,
    /// Density below which FEC alone is trusted.
    pub p_fec: f64,
    /// Spatial correlation above which corruption is treated as a block.
    pub tau_lowrank: f64,
    /// |tau| below this counts as spatially uncorrelated.
    pub tau_zero: f64,
    pub gamma_thr: f64,
    /// Sign flips are flagged when more than this fraction of a layer flips.
    pub flip_fraction: f64,
    /// Relative magnitude tolerance for a flip against the prior.
    pub flip_tolerance: f64,
    /// Prior entries smaller than this multiple of the prior layer's robust
    /// scale are ignored by the flip detector; near zero, link noise alone
    /// flips signs.
    pub flip_min_magnitude: f64,
    /// Minimum length of a run of identical values reported as missing.
    pub min_run: usize,
    /// Gaps of at most this many entries between outliers are closed when a
    /// layer is classified as a block.
    pub block_gap: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            eta: 3.0,
            p_fec: 0.05,
            tau_lowrank: 0.5,
            tau_zero: 0.2,
            gamma_thr: 3.0,
            flip_fraction: 0.02,
            flip_tolerance: 0.5,
            flip_min_magnitude: 1.0,
            min_run: 8,
            block_gap: 8,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 9] = [
            ("eta", self.eta > 0.0),
            ("p_fec", self.p_fec > 0.0 && self.p_fec < 1.0),
            (
                "tau_lowrank",
                self.tau_lowrank > -1.0 && self.tau_lowrank < 1.0,
            ),
            ("tau_zero", self.tau_zero > 0.0 && self.tau_zero <= 1.0),
            ("gamma_thr", self.gamma_thr >= 1.0),
            (
                "flip_fraction",
                self.flip_fraction > 0.0 && self.flip_fraction < 1.0,
            ),
            (
                "flip_tolerance",
                self.flip_tolerance > 0.0 && self.flip_tolerance <= 1.0,
            ),
            ("flip_min_magnitude", self.flip_min_magnitude >= 0.0),
            ("min_run", self.min_run >= 2),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(EmarError::invalid(format!(
                    "detection threshold `{name}` out of range"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepairMode {
    Fec,
    Retransmission,
    RobustAggregation,
    LowRankCompletion,
    EmaFallback,
}

impl RepairMode {
    pub const ALL: [RepairMode; 5] = [
        RepairMode::Fec,
        RepairMode::Retransmission,
        RepairMode::RobustAggregation,
        RepairMode::LowRankCompletion,
        RepairMode::EmaFallback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RepairMode::Fec => "fec",
            RepairMode::Retransmission => "retransmission",
            RepairMode::RobustAggregation => "robust_aggregation",
            RepairMode::LowRankCompletion => "lowrank_completion",
            RepairMode::EmaFallback => "ema_fallback",
        }
    }

    /// Ordering used to summarise several layers by their most invasive mode.
    pub fn severity(self) -> u8 {
        match self {
            RepairMode::Fec => 0,
            RepairMode::EmaFallback => 1,
            RepairMode::Retransmission => 2,
            RepairMode::LowRankCompletion => 3,
            RepairMode::RobustAggregation => 4,
        }
    }
}

impl fmt::Display for RepairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which rule fired, i.e. the distortion the detector believes it saw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistortionClass {
    Clean,
    RandomNoise,
    LargeRandom,
    Burst,
    MissingSegment,
    SignFlip,
    HeavyTail,
    Mixed,
}

impl DistortionClass {
    pub fn name(self) -> &'static str {
        match self {
            DistortionClass::Clean => "clean",
            DistortionClass::RandomNoise => "random",
            DistortionClass::LargeRandom => "large_random",
            DistortionClass::Burst => "burst",
            DistortionClass::MissingSegment => "missing",
            DistortionClass::SignFlip => "sign_flip",
            DistortionClass::HeavyTail => "heavy_tail",
            DistortionClass::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustStats {
    pub m: f64,
    pub sigma: f64,
    pub eta: f64,
}

pub fn robust_stats(layer: &[f32], eta: f64) -> Result<RobustStats> {
    let v: Vec<f64> = layer.iter().map(|&x| x as f64).collect();
    let m = median(&v).ok_or_else(|| EmarError::invalid("robust statistics of an empty layer"))?;
    let sigma = MAD_TO_SIGMA * mad(&v, m).unwrap_or(0.0);
    Ok(RobustStats { m, sigma, eta })
}

/// Fraction of entries outside `m +/- eta*sigma` and the outlier mask. With
/// `sigma = 0` every entry different from `m` is an outlier.
pub fn corruption_density(layer: &[f32], stats: &RobustStats) -> (f64, Vec<bool>) {
    let limit = stats.eta * stats.sigma;
    let mask: Vec<bool> = layer
        .iter()
        .map(|&x| {
            let dev = (x as f64 - stats.m).abs();
            if stats.sigma > 0.0 {
                dev > limit
            } else {
                dev != 0.0
            }
        })
        .collect();
    let count = mask.iter().filter(|&&b| b).count();
    let p_b = if layer.is_empty() {
        0.0
    } else {
        count as f64 / layer.len() as f64
    };
    (p_b, mask)
}

/// Lag-1 Pearson autocorrelation of a binary mask; zero when either shifted
/// series is constant.
pub fn spatial_correlation(mask: &[bool]) -> Result<f64> {
    if mask.len() < 3 {
        return Err(EmarError::invalid(format!(
            "spatial correlation needs at least 3 entries, got {}",
            mask.len()
        )));
    }
    let n = (mask.len() - 1) as f64;
    let x = &mask[..mask.len() - 1];
    let y = &mask[1..];
    let sum = |s: &[bool]| s.iter().filter(|&&b| b).count() as f64;
    let (sx, sy) = (sum(x), sum(y));
    let sxy = x.iter().zip(y).filter(|(a, b)| **a && **b).count() as f64;
    // Binary series: sum of squares equals the sum.
    let cov = sxy - sx * sy / n;
    let vx = sx - sx * sx / n;
    let vy = sy - sy * sy / n;
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Population kurtosis; `None` when undefined (fewer than 4 entries or zero
/// variance).
pub fn kurtosis(layer: &[f32]) -> Option<f64> {
    let v: Vec<f64> = layer.iter().map(|&x| x as f64).collect();
    population_kurtosis(&v)
}

/// Maximal runs of bit-identical values of length at least `min_run`.
pub fn detect_missing_runs(layer: &[f32], min_run: usize) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = 0;
    for j in 1..=layer.len() {
        if j == layer.len() || layer[j].to_bits() != layer[start].to_bits() {
            if j - start >= min_run.max(1) {
                runs.push(start..j);
            }
            start = j;
        }
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignFlips {
    pub count: usize,
    pub indices: Vec<usize>,
}

/// Entries whose sign is opposite to the prior while their magnitude stays
/// within `tolerance` (relative) of the prior's. Prior entries with
/// magnitude below `floor` are skipped. `None` without a prior.
pub fn detect_sign_flips(
    received: &[f32],
    prior: Option<&[f32]>,
    tolerance: f64,
    floor: f64,
) -> Result<Option<SignFlips>> {
    let Some(prior) = prior else {
        return Ok(None);
    };
    if prior.len() != received.len() {
        return Err(EmarError::DimensionMismatch {
            expected: received.len(),
            actual: prior.len(),
        });
    }
    let indices: Vec<usize> = received
        .iter()
        .zip(prior)
        .enumerate()
        .filter(|(_, (&r, &p))| {
            let (r, p) = (r as f64, p as f64);
            p.abs() >= floor && r * p < 0.0 && (r.abs() - p.abs()).abs() <= tolerance * p.abs()
        })
        .map(|(j, _)| j)
        .collect();
    Ok(Some(SignFlips {
        count: indices.len(),
        indices,
    }))
}

/// The inputs to the mode decision for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Indicators {
    pub p_b: f64,
    pub tau: f64,
    pub gamma: Option<f64>,
    /// Kurtosis of the flagged deviations; `None` when not measured, in which
    /// case the heavy-tail decision rests on `gamma` alone.
    pub tail_gamma: Option<f64>,
    pub has_missing_run: bool,
    pub sign_flip_flag: bool,
}

impl Indicators {
    /// Indicators with only the three headline statistics set.
    pub fn basic(p_b: f64, tau: f64, gamma: Option<f64>) -> Self {
        Self {
            p_b,
            tau,
            gamma,
            tail_gamma: None,
            has_missing_run: false,
            sign_flip_flag: false,
        }
    }
}

pub fn classify(ind: &Indicators, cfg: &DetectionConfig) -> (RepairMode, DistortionClass) {
    if ind.tau > cfg.tau_lowrank {
        return (RepairMode::LowRankCompletion, DistortionClass::Burst);
    }
    if ind.has_missing_run {
        return (
            RepairMode::LowRankCompletion,
            DistortionClass::MissingSegment,
        );
    }
    if ind.sign_flip_flag {
        return (RepairMode::RobustAggregation, DistortionClass::SignFlip);
    }
    let heavy = ind.gamma.is_some_and(|g| g > cfg.gamma_thr)
        && ind.tail_gamma.is_none_or(|g| g > cfg.gamma_thr);
    if heavy {
        return (RepairMode::RobustAggregation, DistortionClass::HeavyTail);
    }
    if ind.p_b < cfg.p_fec {
        let class = if ind.p_b == 0.0 {
            DistortionClass::Clean
        } else {
            DistortionClass::RandomNoise
        };
        return (RepairMode::Fec, class);
    }
    if ind.p_b > cfg.p_fec && ind.tau.abs() < cfg.tau_zero {
        return (RepairMode::Retransmission, DistortionClass::LargeRandom);
    }
    (RepairMode::EmaFallback, DistortionClass::Mixed)
}

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: usize,
    pub range: Range<usize>,
    pub stats: RobustStats,
    /// `|corrupted ∩ layer| / |layer|`.
    pub p_b: f64,
    /// Fraction of statistical outliers alone.
    pub outlier_fraction: f64,
    pub tau: f64,
    pub gamma: Option<f64>,
    pub tail_gamma: Option<f64>,
    /// Missing runs, in layer-local coordinates.
    pub missing_runs: Vec<Range<usize>>,
    pub sign_flips: Option<SignFlips>,
    pub sign_flip_flag: bool,
    pub class: DistortionClass,
    pub mode: RepairMode,
    /// Clean/corrupted split of the layer, layer-local.
    pub index_sets: IndexSets,
}

impl LayerReport {
    pub fn indicators(&self) -> Indicators {
        Indicators {
            p_b: self.p_b,
            tau: self.tau,
            gamma: self.gamma,
            tail_gamma: self.tail_gamma,
            has_missing_run: !self.missing_runs.is_empty(),
            sign_flip_flag: self.sign_flip_flag,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectionReport {
    pub layers: Vec<LayerReport>,
    /// Global clean/corrupted split.
    pub index_sets: IndexSets,
}

impl DetectionReport {
    /// The most invasive mode over all layers.
    pub fn mode(&self) -> RepairMode {
        self.layers
            .iter()
            .map(|l| l.mode)
            .max_by_key(|m| m.severity())
            .unwrap_or(RepairMode::Fec)
    }

    pub fn is_clean(&self) -> bool {
        self.index_sets.corrupted().is_empty()
    }

    /// CSV rows: round, client, layer, p_b, tau, gamma, n_missing_runs,
    /// sign_flips, mode. Undefined values are written as `nan`.
    pub fn csv_rows(&self, round: u32, client: u16) -> Vec<Vec<String>> {
        self.layers
            .iter()
            .map(|l| {
                vec![
                    round.to_string(),
                    client.to_string(),
                    l.layer.to_string(),
                    crate::report::fmt_f64(l.p_b),
                    crate::report::fmt_f64(l.tau),
                    crate::report::fmt_f64(l.gamma.unwrap_or(f64::NAN)),
                    l.missing_runs.len().to_string(),
                    l.sign_flips.as_ref().map_or(0, |s| s.count).to_string(),
                    l.mode.name().to_string(),
                ]
            })
            .collect()
    }
}

pub const DETECTION_CSV_HEADER: [&str; 9] = [
    "round",
    "client",
    "layer",
    "p_b",
    "tau",
    "gamma",
    "n_missing_runs",
    "sign_flips",
    "mode",
];

fn close_gaps(mask: &mut [bool], max_gap: usize) {
    let mut last: Option<usize> = None;
    for j in 0..mask.len() {
        if mask[j] {
            if let Some(prev) = last {
                if j - prev > 1 && j - prev - 1 <= max_gap {
                    mask[prev + 1..j].iter_mut().for_each(|b| *b = true);
                }
            }
            last = Some(j);
        }
    }
}

fn detect_layer(
    layer: usize,
    range: Range<usize>,
    values: &[f32],
    prior: Option<&[f32]>,
    known: Option<&[bool]>,
    cfg: &DetectionConfig,
) -> Result<LayerReport> {
    let stats = robust_stats(values, cfg.eta)?;
    let (outlier_fraction, outliers) = corruption_density(values, &stats);
    let tau = if values.len() >= 3 {
        spatial_correlation(&outliers)?
    } else {
        0.0
    };
    let gamma = kurtosis(values);
    let flagged: Vec<f64> = values
        .iter()
        .zip(&outliers)
        .filter(|(_, &o)| o)
        .map(|(&x, _)| x as f64 - stats.m)
        .collect();
    // Fewer than four outliers is no tail at all, not an unmeasured one.
    let tail_gamma = population_kurtosis(&flagged).or(Some(0.0));
    let missing_runs = detect_missing_runs(values, cfg.min_run);
    let floor = prior.map_or(0.0, |p| cfg.flip_min_magnitude * robust_scale_or_rms(p));
    let sign_flips = detect_sign_flips(values, prior, cfg.flip_tolerance, floor)?;
    let sign_flip_flag = sign_flips
        .as_ref()
        .is_some_and(|s| s.count as f64 > cfg.flip_fraction * values.len() as f64);

    let mut corrupted = outliers;
    if tau > cfg.tau_lowrank {
        close_gaps(&mut corrupted, cfg.block_gap);
    }
    for run in &missing_runs {
        corrupted[run.clone()].iter_mut().for_each(|b| *b = true);
    }
    if sign_flip_flag {
        for &j in &sign_flips.as_ref().unwrap().indices {
            corrupted[j] = true;
        }
    }
    if let Some(known) = known {
        for (c, &k) in corrupted.iter_mut().zip(known) {
            *c |= k;
        }
    }
    let index_sets = IndexSets::from_mask(&corrupted);
    let p_b = index_sets.corrupted().len() as f64 / values.len() as f64;
    let ind = Indicators {
        p_b,
        tau,
        gamma,
        tail_gamma,
        has_missing_run: !missing_runs.is_empty(),
        sign_flip_flag,
    };
    let (mode, class) = classify(&ind, cfg);
    Ok(LayerReport {
        layer,
        range,
        stats,
        p_b,
        outlier_fraction,
        tau,
        gamma,
        tail_gamma,
        missing_runs,
        sign_flips,
        sign_flip_flag,
        class,
        mode,
        index_sets,
    })
}

/// Run every detector on every layer of `received`.
///
/// `prior` is a reference that clean data agrees with in sign, such as the
/// coordinate median of the other clients' updates (enables sign-flip
/// detection); `known_corrupted` marks coordinates already known to be bad,
/// e.g. chunks FEC could not rebuild. Both are indexed over the full vector.
pub fn detect(
    received: &ModelUpdate,
    partition: &LayerPartition,
    prior: Option<&[f32]>,
    known_corrupted: Option<&[bool]>,
    cfg: &DetectionConfig,
) -> Result<DetectionReport> {
    let d = received.dim();
    if partition.dim() != d {
        return Err(EmarError::DimensionMismatch {
            expected: partition.dim(),
            actual: d,
        });
    }
    for other in [prior.map(<[f32]>::len), known_corrupted.map(<[bool]>::len)]
        .into_iter()
        .flatten()
    {
        if other != d {
            return Err(EmarError::DimensionMismatch {
                expected: d,
                actual: other,
            });
        }
    }
    let mut layers = Vec::with_capacity(partition.num_layers());
    let mut mask = vec![false; d];
    for (l, range) in partition.ranges().iter().enumerate() {
        let report = detect_layer(
            l,
            range.clone(),
            &received.values[range.clone()],
            prior.map(|p| &p[range.clone()]),
            known_corrupted.map(|k| &k[range.clone()]),
            cfg,
        )?;
        for &j in report.index_sets.corrupted() {
            mask[range.start + j] = true;
        }
        layers.push(report);
    }
    Ok(DetectionReport {
        layers,
        index_sets: IndexSets::from_mask(&mask),
    })
}
