//! Central Gaussian mechanism and zCDP accountant.
//!
//! One release with noise std `sigma * C` on a sensitivity-`C` query is
//! `1 / (2 sigma^2)`-zCDP; T releases compose additively, and
//! `rho`-zCDP implies `(rho + 2 sqrt(rho ln(1/delta)), delta)`-DP.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{EmarError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyLedger {
    pub sigma_cen: f64,
    pub clip_norm: f64,
    pub rounds: u64,
    pub delta: f64,
    pub epsilon: f64,
}

impl PrivacyLedger {
    pub fn new(sigma_cen: f64, clip_norm: f64, delta: f64) -> Result<Self> {
        if !(sigma_cen >= 0.0) || !sigma_cen.is_finite() {
            return Err(EmarError::invalid(format!(
                "noise multiplier {sigma_cen} must be >= 0"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(EmarError::invalid(format!("delta {delta} outside (0, 1)")));
        }
        if !(clip_norm > 0.0) {
            return Err(EmarError::invalid("clip norm must be positive"));
        }
        Ok(Self {
            sigma_cen,
            clip_norm,
            rounds: 0,
            delta,
            epsilon: 0.0,
        })
    }

    pub fn noise_std(&self) -> f64 {
        self.sigma_cen * self.clip_norm
    }

    /// Record one more release.
    pub fn step(&mut self) {
        self.rounds += 1;
        self.epsilon = account_privacy(self);
    }

    /// CSV row: round, sigma_cen, T, epsilon, delta.
    pub fn csv_row(&self, round: u32) -> Vec<String> {
        vec![
            round.to_string(),
            crate::report::fmt_f64(self.sigma_cen),
            self.rounds.to_string(),
            crate::report::fmt_f64(self.epsilon),
            crate::report::fmt_f64(self.delta),
        ]
    }
}

pub const PRIVACY_CSV_HEADER: [&str; 5] = ["round", "sigma_cen", "T", "epsilon", "delta"];

/// zCDP epsilon after `rounds` releases at noise multiplier `sigma`.
/// Infinite when `sigma = 0` and at least one round was released.
pub fn zcdp_epsilon(sigma: f64, rounds: u64, delta: f64) -> f64 {
    if rounds == 0 {
        return 0.0;
    }
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    let rho = rounds as f64 / (2.0 * sigma * sigma);
    rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt()
}

pub fn account_privacy(ledger: &PrivacyLedger) -> f64 {
    zcdp_epsilon(ledger.sigma_cen, ledger.rounds, ledger.delta)
}

/// Noise multiplier that spends exactly `epsilon` over `rounds` releases.
pub fn sigma_for_epsilon(epsilon: f64, rounds: u64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || rounds == 0 || !(delta > 0.0 && delta < 1.0) {
        return Err(EmarError::invalid(
            "need epsilon > 0, rounds > 0 and delta in (0, 1)",
        ));
    }
    let l = (1.0 / delta).ln();
    // sqrt(rho) solves x^2 + 2 sqrt(L) x - epsilon = 0.
    let x = -l.sqrt() + (l + epsilon).sqrt();
    let rho = x * x;
    Ok((rounds as f64 / (2.0 * rho)).sqrt())
}

/// Add i.i.d. `N(0, std^2)` to every entry.
pub fn add_gaussian_noise<R: Rng + ?Sized>(values: &mut [f64], std: f64, rng: &mut R) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    for v in values.iter_mut() {
        *v += normal.sample(rng);
    }
}

/// Perturb the aggregate with `N(0, (sigma C)^2)` and charge one round to
/// the ledger.
pub fn add_central_dp_noise<R: Rng + ?Sized>(
    aggregate: &[f64],
    ledger: &PrivacyLedger,
    rng: &mut R,
) -> (Vec<f64>, PrivacyLedger) {
    let mut out = aggregate.to_vec();
    add_gaussian_noise(&mut out, ledger.noise_std(), rng);
    let mut next = *ledger;
    next.step();
    (out, next)
}
