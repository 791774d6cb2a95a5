//! Synthetic learning tasks with per-client drift in a planted subspace.
//!
//! Client `i` at round `t` has true weights
//! `w_i(t) = w0 + U beta_i(t)` where `U` is a random `d x r` orthonormal
//! basis and `beta_i(t) = (scale / sqrt(r)) (sin(2 pi t / P_k + phi_k) + h c_i)`
//! mixes a slow common drift with a fixed client offset `c_i`. Features are
//! `N(shift_i, I)` with a per-client mean shift; features and label noise are
//! drawn once, labels are recomputed from the current true weights.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{TaskConfig, TaskKind};
use crate::error::{EmarError, Result};
use crate::rng::{stream_rng, Stream};

/// Row-major samples with their fixed label noise.
#[derive(Debug, Clone)]
pub struct Shard {
    pub x: Vec<f64>,
    pub noise: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

impl Shard {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.x[k * self.d..(k + 1) * self.d]
    }

    fn generate<R: Rng>(n: usize, d: usize, shift: &[f64], noise_std: f64, rng: &mut R) -> Self {
        let mut x = Vec::with_capacity(n * d);
        for _ in 0..n {
            for s in shift {
                let z: f64 = StandardNormal.sample(rng);
                x.push(s + z);
            }
        }
        let noise = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                noise_std * z
            })
            .collect::<Vec<f64>>();
        Self { x, noise, n, d }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub d: usize,
    pub w0: Vec<f64>,
    /// `d x r` orthonormal drift basis.
    pub basis: DMatrix<f64>,
    pub drift_scale: f64,
    pub heterogeneity: f64,
    pub periods: Vec<f64>,
    pub phases: Vec<f64>,
    pub offsets: Vec<Vec<f64>>,
    pub train: Vec<Shard>,
    pub test: Vec<Shard>,
}

impl SyntheticTask {
    pub fn generate(cfg: &TaskConfig, clients: usize, seed: u64) -> Result<Self> {
        let d = cfg.dim();
        let r = cfg.drift_rank;
        if r == 0 || r > d {
            return Err(EmarError::invalid(format!(
                "drift rank {r} outside [1, {d}]"
            )));
        }
        let mut rng = stream_rng(seed, u64::MAX, 0, Stream::TaskData);
        let w0: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / (d as f64).sqrt()
            })
            .collect();
        let g = DMatrix::<f64>::from_fn(d, r, |_, _| StandardNormal.sample(&mut rng));
        let basis = g.qr().q();
        let periods = (0..r)
            .map(|k| cfg.drift_period / (1.0 + k as f64 * 0.25))
            .collect();
        let phases = (0..r)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let mut offsets = Vec::with_capacity(clients);
        let mut train = Vec::with_capacity(clients);
        let mut test = Vec::with_capacity(clients);
        for i in 0..clients {
            let mut crng = stream_rng(seed, i as u64, 0, Stream::TaskData);
            offsets.push((0..r).map(|_| StandardNormal.sample(&mut crng)).collect());
            let shift: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut crng);
                    cfg.feature_shift * z
                })
                .collect();
            train.push(Shard::generate(
                cfg.train_samples,
                d,
                &shift,
                cfg.noise_std,
                &mut crng,
            ));
            test.push(Shard::generate(
                cfg.test_samples,
                d,
                &shift,
                cfg.noise_std,
                &mut crng,
            ));
        }
        Ok(Self {
            kind: cfg.kind,
            d,
            w0,
            basis,
            drift_scale: cfg.drift_scale,
            heterogeneity: cfg.heterogeneity,
            periods,
            phases,
            offsets,
            train,
            test,
        })
    }

    pub fn clients(&self) -> usize {
        self.train.len()
    }

    /// Drift coefficients of `client` at `round`.
    pub fn coefficients(&self, client: usize, round: u32) -> Vec<f64> {
        let r = self.periods.len();
        let c = self.drift_scale / (r as f64).sqrt();
        (0..r)
            .map(|k| {
                let common =
                    (std::f64::consts::TAU * round as f64 / self.periods[k] + self.phases[k]).sin();
                c * (common + self.heterogeneity * self.offsets[client][k])
            })
            .collect()
    }

    pub fn true_weights(&self, client: usize, round: u32) -> Vec<f64> {
        let beta = self.coefficients(client, round);
        let mut w = self.w0.clone();
        for (k, b) in beta.iter().enumerate() {
            for (j, wj) in w.iter_mut().enumerate() {
                *wj += b * self.basis[(j, k)];
            }
        }
        w
    }

    /// Labels of `shard` under weights `w`: `x.w + e` for regression,
    /// `1[x.w + e > 0]` for classification.
    pub fn labels(&self, shard: &Shard, w: &[f64]) -> Vec<f64> {
        (0..shard.n)
            .map(|k| {
                let z = dot(shard.row(k), w) + shard.noise[k];
                match self.kind {
                    TaskKind::LinearRegression => z,
                    TaskKind::LogisticClassification => f64::from(z > 0.0),
                }
            })
            .collect()
    }

    pub fn train_labels(&self, client: usize, round: u32) -> Vec<f64> {
        self.labels(&self.train[client], &self.true_weights(client, round))
    }

    /// Test loss and accuracy of `w` pooled over every client's test shard
    /// at `round`. Regression accuracy is `1 - MSE / Var(y)`.
    pub fn evaluate(&self, w: &[f64], round: u32) -> Evaluation {
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut ys = Vec::new();
        let mut n = 0usize;
        for (i, shard) in self.test.iter().enumerate() {
            let y = self.labels(shard, &self.true_weights(i, round));
            for (k, &yk) in y.iter().enumerate() {
                let z = dot(shard.row(k), w);
                match self.kind {
                    TaskKind::LinearRegression => loss += (z - yk) * (z - yk),
                    TaskKind::LogisticClassification => {
                        let p = sigmoid(z).clamp(1e-12, 1.0 - 1e-12);
                        loss -= yk * p.ln() + (1.0 - yk) * (1.0 - p).ln();
                        if f64::from(z > 0.0) == yk {
                            correct += 1;
                        }
                    }
                }
            }
            n += y.len();
            ys.extend(y);
        }
        let loss = loss / n as f64;
        let accuracy = match self.kind {
            TaskKind::LinearRegression => {
                let var = crate::stats::sample_variance(&ys).unwrap_or(1.0);
                1.0 - loss / var
            }
            TaskKind::LogisticClassification => correct as f64 / n as f64,
        };
        Evaluation { loss, accuracy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn small() -> TaskConfig {
        let mut c = ExperimentConfig::with_seed(0).task;
        c.layers = vec![16, 16];
        c.train_samples = 64;
        c.test_samples = 32;
        c.drift_rank = 4;
        c
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = SyntheticTask::generate(&small(), 3, 9).unwrap();
        let b = SyntheticTask::generate(&small(), 3, 9).unwrap();
        let c = SyntheticTask::generate(&small(), 3, 10).unwrap();
        assert_eq!(a.train[1].x, b.train[1].x);
        assert_eq!(a.true_weights(2, 5), b.true_weights(2, 5));
        assert_ne!(a.w0, c.w0);
    }

    #[test]
    fn drift_stays_in_planted_subspace() {
        let t = SyntheticTask::generate(&small(), 3, 1).unwrap();
        let ut = t.basis.transpose();
        for (i, round) in [(0usize, 0u32), (1, 7), (2, 31)] {
            let w = t.true_weights(i, round);
            let diff =
                nalgebra::DVector::from_iterator(t.d, w.iter().zip(&t.w0).map(|(a, b)| a - b));
            let proj = &t.basis * (&ut * &diff);
            assert!((proj - diff).norm() < 1e-12);
        }
    }

    #[test]
    fn true_weights_have_zero_test_error_without_noise() {
        let mut cfg = small();
        cfg.noise_std = 0.0;
        cfg.heterogeneity = 0.0;
        let t = SyntheticTask::generate(&cfg, 2, 4).unwrap();
        let e = t.evaluate(&t.true_weights(0, 3), 3);
        assert!(e.loss < 1e-20);
        assert!((e.accuracy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_and_test_samples_are_disjoint() {
        let t = SyntheticTask::generate(&small(), 2, 4).unwrap();
        for i in 0..2 {
            assert_ne!(t.train[i].row(0), t.test[i].row(0));
        }
    }

    #[test]
    fn logistic_labels_are_binary() {
        let mut cfg = small();
        cfg.kind = TaskKind::LogisticClassification;
        let t = SyntheticTask::generate(&cfg, 2, 4).unwrap();
        let y = t.train_labels(1, 2);
        assert!(y.iter().all(|&v| v == 0.0 || v == 1.0));
        let e = t.evaluate(&t.true_weights(0, 2), 2);
        assert!(e.accuracy > 0.5);
    }
}
