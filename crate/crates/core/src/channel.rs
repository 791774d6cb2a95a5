//! Fault injectors for the five corruption mechanisms and the lossy link.
//!
//! Each injector is a pure function of `(update, parameters, seed)` and
//! returns the damaged update together with a ground-truth mask of the
//! indices it touched. [`compose`] applies several injectors in the fixed
//! order random -> burst -> missing -> heavy-tail -> sign and unions their
//! masks.

use rand::Rng;
use rand_distr::{Distribution, Normal, StudentT};

use crate::error::{EmarError, Result};
use crate::repair::fec::Chunk;
use crate::rng::rng_from_seed;
use crate::stats::robust_scale_or_rms;
use crate::update::ModelUpdate;

/// Burst amplitude as a multiple of the update's robust scale.
pub const BURST_AMPLITUDE: f64 = 10.0;
/// Degrees of freedom of the heavy-tailed spike law.
pub const TAIL_DOF: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionKind {
    None,
    RandomNoise,
    Burst,
    MissingSegment,
    HeavyTail,
    SignFlip,
}

impl CorruptionKind {
    pub const INJECTED: [CorruptionKind; 5] = [
        CorruptionKind::RandomNoise,
        CorruptionKind::Burst,
        CorruptionKind::MissingSegment,
        CorruptionKind::HeavyTail,
        CorruptionKind::SignFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::None => "none",
            CorruptionKind::RandomNoise => "random",
            CorruptionKind::Burst => "burst",
            CorruptionKind::MissingSegment => "missing",
            CorruptionKind::HeavyTail => "heavy_tail",
            CorruptionKind::SignFlip => "sign_flip",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [CorruptionKind::None]
            .into_iter()
            .chain(Self::INJECTED)
            .find(|k| k.name() == name)
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameters of one injector. Fields that do not apply to `kind` are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// Per-index selection probability (random, sign flip, heavy tail).
    pub density: f64,
    /// Length of the contiguous block (burst, missing).
    pub burst_len: usize,
    /// Standard deviation of additive noise (random).
    pub noise_scale: f64,
    /// Scale of the Student-t spikes (heavy tail).
    pub spike_scale: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        Self {
            kind: CorruptionKind::None,
            density: 0.0,
            burst_len: 1,
            noise_scale: 1.0,
            spike_scale: 1.0,
            seed: 0,
        }
    }

    pub fn random_noise(p: f64, s: f64, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::RandomNoise,
            density: p,
            noise_scale: s,
            seed,
            ..Self::none()
        }
    }

    pub fn burst(len: usize, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::Burst,
            burst_len: len,
            seed,
            ..Self::none()
        }
    }

    pub fn missing(len: usize, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::MissingSegment,
            burst_len: len,
            seed,
            ..Self::none()
        }
    }

    pub fn sign_flip(p: f64, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::SignFlip,
            density: p,
            seed,
            ..Self::none()
        }
    }

    pub fn heavy_tail(p: f64, a: f64, seed: u64) -> Self {
        Self {
            kind: CorruptionKind::HeavyTail,
            density: p,
            spike_scale: a,
            seed,
            ..Self::none()
        }
    }

    /// Injector of `kind` at corruption level `rate`: `rate` is the selection
    /// probability for the scattered kinds and the fraction of `d` covered by
    /// the block kinds. Noise and spike magnitudes are 20x and 10x `scale`.
    pub fn at_rate(kind: CorruptionKind, rate: f64, d: usize, scale: f64, seed: u64) -> Self {
        let len = ((rate * d as f64).round() as usize).clamp(1, d.max(1));
        match kind {
            CorruptionKind::None => Self::none(),
            CorruptionKind::RandomNoise => Self::random_noise(rate, 20.0 * scale, seed),
            CorruptionKind::Burst => Self::burst(len, seed),
            CorruptionKind::MissingSegment => Self::missing(len, seed),
            CorruptionKind::HeavyTail => Self::heavy_tail(rate, 10.0 * scale, seed),
            CorruptionKind::SignFlip => Self::sign_flip(rate, seed),
        }
    }

    /// The reference parameters used to evaluate the detector: random noise
    /// p=0.05 at 20x scale, bursts and missing segments over 10% of `d`,
    /// heavy-tail p=0.02 at 10x scale, sign flips p=0.1.
    pub fn canonical(kind: CorruptionKind, d: usize, scale: f64, seed: u64) -> Self {
        let rate = match kind {
            CorruptionKind::RandomNoise => 0.05,
            CorruptionKind::HeavyTail => 0.02,
            _ => 0.1,
        };
        Self::at_rate(kind, rate, d, scale, seed)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        match self.kind {
            CorruptionKind::None => Ok(()),
            CorruptionKind::RandomNoise | CorruptionKind::SignFlip if !unit(self.density) => Err(
                EmarError::invalid(format!("density {} outside [0, 1]", self.density)),
            ),
            CorruptionKind::RandomNoise if !(self.noise_scale > 0.0) => {
                Err(EmarError::invalid("noise scale must be positive"))
            }
            CorruptionKind::HeavyTail if !(self.density > 0.0 && self.density <= 1.0) => {
                Err(EmarError::invalid(format!(
                    "heavy-tail density {} outside (0, 1]",
                    self.density
                )))
            }
            CorruptionKind::HeavyTail if !(self.spike_scale > 0.0) => {
                Err(EmarError::invalid("spike scale must be positive"))
            }
            CorruptionKind::Burst | CorruptionKind::MissingSegment
                if self.burst_len == 0 || self.burst_len > d =>
            {
                Err(EmarError::invalid(format!(
                    "block length {} outside [1, {d}]",
                    self.burst_len
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Indices actually touched by one or more injectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    pub corrupted_indices: Vec<usize>,
    pub specs: Vec<CorruptionSpec>,
}

impl GroundTruthMask {
    pub fn empty() -> Self {
        Self {
            corrupted_indices: Vec::new(),
            specs: Vec::new(),
        }
    }

    fn single(indices: Vec<usize>, spec: CorruptionSpec) -> Self {
        Self {
            corrupted_indices: indices,
            specs: vec![spec],
        }
    }

    /// Kind of the first injector, or `None` when nothing was injected.
    pub fn kind(&self) -> CorruptionKind {
        self.specs.first().map_or(CorruptionKind::None, |s| s.kind)
    }

    pub fn len(&self) -> usize {
        self.corrupted_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrupted_indices.is_empty()
    }

    fn union(&mut self, other: GroundTruthMask) {
        self.corrupted_indices.extend(other.corrupted_indices);
        self.corrupted_indices.sort_unstable();
        self.corrupted_indices.dedup();
        self.specs.extend(other.specs);
    }
}

fn check_density(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(EmarError::invalid(format!("density {p} outside [0, 1]")))
    }
}

fn check_block(len: usize, d: usize) -> Result<()> {
    if len == 0 || len > d {
        Err(EmarError::invalid(format!(
            "block length {len} outside [1, {d}]"
        )))
    } else {
        Ok(())
    }
}

pub fn inject_random_noise(
    w: &ModelUpdate,
    p: f64,
    s: f64,
    seed: u64,
) -> Result<(ModelUpdate, GroundTruthMask)> {
    check_density(p)?;
    let normal =
        Normal::new(0.0, s).map_err(|e| EmarError::invalid(format!("noise scale: {e}")))?;
    let mut rng = rng_from_seed(seed);
    let mut values = w.values.clone();
    let mut mask = Vec::new();
    for (j, v) in values.iter_mut().enumerate() {
        if rng.random_bool(p) {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
            mask.push(j);
        }
    }
    Ok((
        w.with_values(values),
        GroundTruthMask::single(mask, CorruptionSpec::random_noise(p, s, seed)),
    ))
}

/// Replace `[k, k+L)` with uniform noise in `[-A, A]`, `A` = 10x robust
/// scale of `w`, at a uniformly random start `k`.
pub fn inject_burst(
    w: &ModelUpdate,
    len: usize,
    seed: u64,
) -> Result<(ModelUpdate, GroundTruthMask)> {
    let d = w.dim();
    check_block(len, d)?;
    let amplitude = BURST_AMPLITUDE * robust_scale_or_rms(&w.values);
    let mut rng = rng_from_seed(seed);
    let start = rng.random_range(0..=d - len);
    let mut values = w.values.clone();
    for v in &mut values[start..start + len] {
        *v = rng.random_range(-amplitude..=amplitude) as f32;
    }
    Ok((
        w.with_values(values),
        GroundTruthMask::single(
            (start..start + len).collect(),
            CorruptionSpec::burst(len, seed),
        ),
    ))
}

/// Zero a contiguous block of length `len` at a uniformly random start.
pub fn inject_missing(
    w: &ModelUpdate,
    len: usize,
    seed: u64,
) -> Result<(ModelUpdate, GroundTruthMask)> {
    check_block(len, w.dim())?;
    let start = rng_from_seed(seed).random_range(0..=w.dim() - len);
    let (out, mut mask) = inject_missing_at(w, start, len)?;
    mask.specs[0].seed = seed;
    Ok((out, mask))
}

/// Zero `[start, start+len)`.
pub fn inject_missing_at(
    w: &ModelUpdate,
    start: usize,
    len: usize,
) -> Result<(ModelUpdate, GroundTruthMask)> {
    check_block(len, w.dim())?;
    if start + len > w.dim() {
        return Err(EmarError::invalid(format!(
            "block [{start}, {}) exceeds dimension {}",
            start + len,
            w.dim()
        )));
    }
    let mut values = w.values.clone();
    values[start..start + len].fill(0.0);
    Ok((
        w.with_values(values),
        GroundTruthMask::single(
            (start..start + len).collect(),
            CorruptionSpec::missing(len, 0),
        ),
    ))
}

pub fn inject_sign_flips(
    w: &ModelUpdate,
    p: f64,
    seed: u64,
) -> Result<(ModelUpdate, GroundTruthMask)> {
    check_density(p)?;
    let mut rng = rng_from_seed(seed);
    let mut values = w.values.clone();
    let mut mask = Vec::new();
    for (j, v) in values.iter_mut().enumerate() {
        if rng.random_bool(p) {
            *v = -*v;
            mask.push(j);
        }
    }
    Ok((
        w.with_values(values),
        GroundTruthMask::single(mask, CorruptionSpec::sign_flip(p, seed)),
    ))
}

/// Add `a * t(2.5)` spikes to each index with probability `p`.
pub fn inject_heavy_tail(
    w: &ModelUpdate,
    p: f64,
    a: f64,
    seed: u64,
) -> Result<(ModelUpdate, GroundTruthMask)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(EmarError::invalid(format!(
            "heavy-tail density {p} outside (0, 1]"
        )));
    }
    if !(a > 0.0) {
        return Err(EmarError::invalid("spike scale must be positive"));
    }
    let t = StudentT::new(TAIL_DOF).expect("positive degrees of freedom");
    let mut rng = rng_from_seed(seed);
    let mut values = w.values.clone();
    let mut mask = Vec::new();
    for (j, v) in values.iter_mut().enumerate() {
        if rng.random_bool(p) {
            *v = (*v as f64 + a * t.sample(&mut rng)) as f32;
            mask.push(j);
        }
    }
    Ok((
        w.with_values(values),
        GroundTruthMask::single(mask, CorruptionSpec::heavy_tail(p, a, seed)),
    ))
}

/// Apply a single injector described by `spec`.
pub fn inject(w: &ModelUpdate, spec: &CorruptionSpec) -> Result<(ModelUpdate, GroundTruthMask)> {
    match spec.kind {
        CorruptionKind::None => Ok((w.clone(), GroundTruthMask::empty())),
        CorruptionKind::RandomNoise => {
            inject_random_noise(w, spec.density, spec.noise_scale, spec.seed)
        }
        CorruptionKind::Burst => inject_burst(w, spec.burst_len, spec.seed),
        CorruptionKind::MissingSegment => inject_missing(w, spec.burst_len, spec.seed),
        CorruptionKind::HeavyTail => {
            inject_heavy_tail(w, spec.density, spec.spike_scale, spec.seed)
        }
        CorruptionKind::SignFlip => inject_sign_flips(w, spec.density, spec.seed),
    }
}

/// Apply several injectors in the canonical order (random, burst, missing,
/// heavy tail, sign), regardless of the order in `specs`.
pub fn compose(
    w: &ModelUpdate,
    specs: &[CorruptionSpec],
) -> Result<(ModelUpdate, GroundTruthMask)> {
    let mut ordered = specs.to_vec();
    ordered.sort_by_key(|s| s.kind);
    let mut current = w.clone();
    let mut mask = GroundTruthMask::empty();
    for spec in &ordered {
        let (next, m) = inject(&current, spec)?;
        current = next;
        mask.union(m);
    }
    Ok((current, mask))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub packet_loss: f64,
    pub noise_variance: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            packet_loss: 0.05,
            noise_variance: 1e-4,
        }
    }
}

impl ChannelParams {
    pub fn new(packet_loss: f64, noise_variance: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&packet_loss) {
            return Err(EmarError::invalid(format!(
                "packet loss {packet_loss} outside [0, 1]"
            )));
        }
        if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
            return Err(EmarError::invalid(
                "channel noise variance must be finite and >= 0",
            ));
        }
        Ok(Self {
            packet_loss,
            noise_variance,
        })
    }

    pub fn perfect() -> Self {
        Self {
            packet_loss: 0.0,
            noise_variance: 0.0,
        }
    }

    pub fn lossy(packet_loss: f64) -> Result<Self> {
        Self::new(packet_loss, 0.0)
    }
}

/// Send chunks over the link: each is erased with probability `packet_loss`;
/// survivors get `N(0, noise_variance)` added to every float of the payload.
/// The header (and its CRC) is left untouched, so a perturbed chunk fails its
/// checksum at the receiver.
pub fn apply_channel(chunks: &[Chunk], params: &ChannelParams, seed: u64) -> Vec<Option<Chunk>> {
    let mut rng = rng_from_seed(seed);
    let noise = (params.noise_variance > 0.0)
        .then(|| Normal::new(0.0, params.noise_variance.sqrt()).expect("finite std"));
    chunks
        .iter()
        .map(|chunk| {
            if rng.random_bool(params.packet_loss) {
                return None;
            }
            let mut out = chunk.clone();
            if let Some(noise) = &noise {
                for b in out.payload.chunks_exact_mut(4) {
                    let v = f32::from_le_bytes(b.try_into().unwrap());
                    let v = (v as f64 + noise.sample(&mut rng)) as f32;
                    b.copy_from_slice(&v.to_le_bytes());
                }
            }
            Some(out)
        })
        .collect()
}
