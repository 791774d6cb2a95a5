//! Rank-r signal subspace of a client's recent accepted updates, and
//! least-squares completion of corrupted coordinates from it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{EmarError, Result};
use crate::stats::{median, MAD_TO_SIGMA};
use crate::update::{HistoryWindow, IndexSets, ModelUpdate};

/// Smallest singular value of the restricted basis accepted by completion.
pub const MIN_SINGULAR_VALUE: f64 = 1e-8;

/// Clean coordinates whose fit residual exceeds this many robust residual
/// scales are moved to the corrupted set by [`SubspaceModel::refine`].
pub const RESIDUAL_ETA: f64 = 5.0;
const REFINE_PASSES: usize = 3;

#[derive(Debug, Clone)]
pub struct SubspaceModel {
    pub mu: DVector<f64>,
    /// `d x r`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
}

impl SubspaceModel {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Fit on arbitrary rows (each of length d). The rank is truncated to the
    /// numerical rank of the centered history when that is smaller than `r`.
    pub fn fit(rows: &[&[f32]], r: usize) -> Result<Self> {
        let k = rows.len();
        if k < 2 {
            return Err(EmarError::InsufficientHistory(format!(
                "subspace fit needs at least 2 updates, have {k}"
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|row| row.len() != d) {
            return Err(EmarError::invalid("history rows differ in length"));
        }
        if r == 0 || r > d.min(k) {
            return Err(EmarError::InsufficientHistory(format!(
                "rank {r} not in [1, min(d={d}, K={k})]"
            )));
        }
        let mut mu = DVector::<f64>::zeros(d);
        for row in rows {
            for (m, &v) in mu.iter_mut().zip(row.iter()) {
                *m += v as f64;
            }
        }
        mu /= k as f64;
        // Centered history, one row per update.
        let x = DMatrix::from_fn(k, d, |i, j| rows[i][j] as f64 - mu[j]);

        let (eigenvalues, basis) = if d > k {
            let gram = (&x * x.transpose()) / k as f64;
            let eig = SymmetricEigen::new(gram);
            let order = descending(&eig.eigenvalues);
            let lambda_max = eig.eigenvalues[order[0]].max(0.0);
            let mut values = Vec::new();
            let mut columns = Vec::new();
            for &i in order.iter().take(r) {
                let lambda = eig.eigenvalues[i];
                if !(lambda > lambda_max * 1e-12 && lambda > 0.0) {
                    break;
                }
                let u = eig.eigenvectors.column(i);
                let v = x.transpose() * u / (k as f64 * lambda).sqrt();
                values.push(lambda);
                columns.push(v);
            }
            (values, columns)
        } else {
            let cov = (x.transpose() * &x) / k as f64;
            let eig = SymmetricEigen::new(cov);
            let order = descending(&eig.eigenvalues);
            let lambda_max = eig.eigenvalues[order[0]].max(0.0);
            let mut values = Vec::new();
            let mut columns = Vec::new();
            for &i in order.iter().take(r) {
                let lambda = eig.eigenvalues[i];
                if !(lambda > lambda_max * 1e-12 && lambda > 0.0) {
                    break;
                }
                values.push(lambda);
                columns.push(eig.eigenvectors.column(i).into_owned());
            }
            (values, columns)
        };
        if basis.is_empty() {
            return Err(EmarError::InsufficientHistory(
                "history has no variance to span a subspace".into(),
            ));
        }
        let basis = orthonormalize(basis);
        Ok(Self {
            mu,
            eigenvalues: eigenvalues[..basis.ncols()].to_vec(),
            basis,
        })
    }

    /// Restrict to a contiguous coordinate range (no re-orthonormalisation).
    pub fn slice(&self, range: std::ops::Range<usize>) -> (DVector<f64>, DMatrix<f64>) {
        (
            self.mu.rows(range.start, range.len()).into_owned(),
            self.basis.rows(range.start, range.len()).into_owned(),
        )
    }

    /// Least-squares coefficients `pinv(V_Omega) (x_Omega - mu_Omega)`.
    pub fn coefficients(&self, values: &[f32], clean: &[usize]) -> Result<DVector<f64>> {
        let r = self.rank();
        if clean.len() < r {
            return Err(EmarError::IllPosed(format!(
                "{} clean coordinates cannot determine rank {r}",
                clean.len()
            )));
        }
        let v_omega = DMatrix::from_fn(clean.len(), r, |i, c| self.basis[(clean[i], c)]);
        let rhs = DVector::from_iterator(
            clean.len(),
            clean.iter().map(|&j| values[j] as f64 - self.mu[j]),
        );
        let svd = v_omega.svd(true, true);
        let s_min = svd
            .singular_values
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !(s_min > MIN_SINGULAR_VALUE) {
            return Err(EmarError::IllPosed(format!(
                "restricted basis is rank deficient (smallest singular value {s_min:e})"
            )));
        }
        svd.solve(&rhs, 0.0)
            .map_err(|e| EmarError::IllPosed(format!("least squares failed: {e}")))
    }

    /// Grow the corrupted set by the clean coordinates the subspace cannot
    /// explain. Damage that stayed under the detector's outlier threshold
    /// still sits far off the fitted subspace, and left in the clean set it
    /// both survives and biases the fit.
    pub fn refine(&self, values: &[f32], sets: &IndexSets, eta: f64) -> Result<IndexSets> {
        let mut mask = sets.mask();
        for _ in 0..REFINE_PASSES {
            let current = IndexSets::from_mask(&mask);
            let alpha = self.coefficients(values, current.clean())?;
            let residuals: Vec<f64> = current
                .clean()
                .iter()
                .map(|&j| values[j] as f64 - self.mu[j] - (self.basis.row(j) * &alpha)[0])
                .collect();
            let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
            let scale = MAD_TO_SIGMA * median(&abs).unwrap_or(0.0);
            if !(scale > 0.0) {
                break;
            }
            let mut grew = false;
            for (&j, r) in current.clean().iter().zip(&abs) {
                if *r > eta * scale {
                    mask[j] = true;
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        Ok(IndexSets::from_mask(&mask))
    }

    /// Fill the corrupted coordinates of `values` with `mu + V alpha`.
    pub fn complete(&self, values: &[f32], sets: &IndexSets) -> Result<Vec<f32>> {
        if values.len() != self.dim() || sets.dim() != self.dim() {
            return Err(EmarError::DimensionMismatch {
                expected: self.dim(),
                actual: values.len(),
            });
        }
        if sets.corrupted().is_empty() {
            return Ok(values.to_vec());
        }
        let alpha = self.coefficients(values, sets.clean())?;
        let mut out = values.to_vec();
        for &j in sets.corrupted() {
            let fill = self.mu[j] + (self.basis.row(j) * &alpha)[0];
            out[j] = fill as f32;
        }
        Ok(out)
    }
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Modified Gram-Schmidt; columns that collapse numerically are dropped.
fn orthonormalize(columns: Vec<DVector<f64>>) -> DMatrix<f64> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(columns.len());
    for mut v in columns {
        for q in &out {
            let proj = q.dot(&v);
            v.axpy(-proj, q, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-10 {
            out.push(v / norm);
        }
    }
    let d = out.first().map_or(0, |c| c.len());
    DMatrix::from_fn(d, out.len(), |i, j| out[j][i])
}

pub fn subspace_fit(window: &HistoryWindow, r: usize) -> Result<SubspaceModel> {
    let rows: Vec<&[f32]> = window.entries().collect();
    SubspaceModel::fit(&rows, r)
}

/// Keep `received` on the clean set and fill the corrupted set, after
/// [`SubspaceModel::refine`], from the subspace model.
pub fn lowrank_complete(
    received: &ModelUpdate,
    sets: &IndexSets,
    model: &SubspaceModel,
) -> Result<ModelUpdate> {
    let refined = model.refine(&received.values, sets, RESIDUAL_ETA)?;
    Ok(received.with_values(model.complete(&received.values, &refined)?))
}
