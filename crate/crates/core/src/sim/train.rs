//! Client-side training: minibatch Adam on the local shard.

use rand::seq::SliceRandom;
use rand::Rng;

use super::task::{dot, sigmoid, Shard, SyntheticTask};
use crate::config::{TaskKind, TrainConfig};
use crate::error::{EmarError, Result};
use crate::privacy::{clip_values, ClipParams};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for j in 0..w.len() {
            self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * grad[j];
            self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
            let m_hat = self.m[j] / c1;
            let v_hat = self.v[j] / c2;
            w[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Mean loss over `rows` and its gradient at `w`.
pub fn loss_and_grad(
    kind: TaskKind,
    shard: &Shard,
    y: &[f64],
    rows: &[usize],
    w: &[f64],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for &k in rows {
        let x = shard.row(k);
        let z = dot(x, w);
        let g = match kind {
            TaskKind::LinearRegression => {
                let r = z - y[k];
                loss += r * r;
                2.0 * r
            }
            TaskKind::LogisticClassification => {
                let p = sigmoid(z);
                let pc = p.clamp(1e-12, 1.0 - 1e-12);
                loss -= y[k] * pc.ln() + (1.0 - y[k]) * (1.0 - pc).ln();
                p - y[k]
            }
        };
        for (gj, xj) in grad.iter_mut().zip(x) {
            *gj += g * xj;
        }
    }
    let n = rows.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Run `epochs` of shuffled minibatch Adam (fresh optimizer state) from
/// `global` and return the clipped weight delta, or `None` when the loss
/// stops being finite.
pub fn train_on_shard<R: Rng + ?Sized>(
    global: &[f64],
    kind: TaskKind,
    shard: &Shard,
    y: &[f64],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<Vec<f32>>> {
    if cfg.epochs == 0 {
        return Err(EmarError::invalid("epochs must be at least 1"));
    }
    if global.len() != shard.d || y.len() != shard.n {
        return Err(EmarError::DimensionMismatch {
            expected: shard.d,
            actual: global.len(),
        });
    }
    let mut w = global.to_vec();
    let mut adam = Adam::new(w.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..shard.n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = loss_and_grad(kind, shard, y, batch, &w);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Ok(None);
            }
            adam.step(&mut w, &grad);
        }
    }
    let delta: Vec<f32> = w.iter().zip(global).map(|(a, b)| (a - b) as f32).collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    Ok(Some(clip_values(&delta, &ClipParams::new(cfg.clip_norm)?)))
}

/// Train `client` of `task` against the labels of `round`.
pub fn client_local_train<R: Rng + ?Sized>(
    global: &[f64],
    task: &SyntheticTask,
    client: u16,
    round: u32,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let shard = task
        .train
        .get(client as usize)
        .ok_or_else(|| EmarError::invalid(format!("task has no client {client}")))?;
    let y = task.train_labels(client as usize, round);
    train_on_shard(global, task.kind, shard, &y, cfg, rng)?
        .ok_or(EmarError::TrainingDiverged { client, round })
}
