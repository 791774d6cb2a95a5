//! Coordinate-wise trimmed mean and median, and Krum.

use crate::error::{EmarError, Result};
use crate::update::ModelUpdate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustMethod {
    /// Drop `floor(beta * n)` smallest and largest values per coordinate.
    TrimmedMean {
        beta: f64,
    },
    Median,
    /// `f` Byzantine inputs tolerated; `None` means `floor((n - 3) / 2)`.
    Krum {
        f: Option<usize>,
    },
}

impl RobustMethod {
    pub fn name(&self) -> &'static str {
        match self {
            RobustMethod::TrimmedMean { .. } => "trimmed_mean",
            RobustMethod::Median => "median",
            RobustMethod::Krum { .. } => "krum",
        }
    }
}

/// Aggregate equal-length rows with `method`.
pub fn aggregate_rows(rows: &[&[f32]], method: RobustMethod) -> Result<Vec<f32>> {
    let n = rows.len();
    if n == 0 {
        return Err(EmarError::invalid("robust aggregation of zero updates"));
    }
    let d = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(EmarError::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    match method {
        RobustMethod::TrimmedMean { beta } => {
            if !(0.0..0.5).contains(&beta) {
                return Err(EmarError::invalid(format!(
                    "trim fraction {beta} outside [0, 0.5)"
                )));
            }
            let cut = (beta * n as f64).floor() as usize;
            Ok(per_coordinate(rows, d, |col| {
                let kept = &col[cut..n - cut];
                kept.iter().sum::<f64>() / kept.len() as f64
            }))
        }
        RobustMethod::Median => Ok(per_coordinate(rows, d, |col| {
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })),
        RobustMethod::Krum { f } => {
            let f = f.unwrap_or(n.saturating_sub(3) / 2);
            if n < f + 3 {
                return Err(EmarError::invalid(format!(
                    "Krum needs n >= f + 3 (n={n}, f={f})"
                )));
            }
            Ok(rows[krum_index(rows, f)].to_vec())
        }
    }
}

fn per_coordinate(rows: &[&[f32]], d: usize, reduce: impl Fn(&[f64]) -> f64) -> Vec<f32> {
    let mut col = vec![0.0f64; rows.len()];
    (0..d)
        .map(|j| {
            for (c, row) in col.iter_mut().zip(rows) {
                *c = row[j] as f64;
            }
            col.sort_by(|a, b| a.total_cmp(b));
            reduce(&col) as f32
        })
        .collect()
}

/// Index of the row minimising the summed squared distance to its
/// `n - f - 2` nearest neighbours. Ties go to the lowest index.
pub fn krum_index(rows: &[&[f32]], f: usize) -> usize {
    let n = rows.len();
    let neighbours = n - f - 2;
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let t = *x as f64 - *y as f64;
                t * t
            })
            .sum()
    };
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let mut ds: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist(rows[i], rows[j]))
            .collect();
        ds.sort_by(|a, b| a.total_cmp(b));
        let score: f64 = ds[..neighbours].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    best.1
}

/// Robust aggregate of whole updates; round and client id come from the
/// first input.
pub fn robust_aggregate(updates: &[ModelUpdate], method: RobustMethod) -> Result<ModelUpdate> {
    let rows: Vec<&[f32]> = updates.iter().map(|u| u.values.as_slice()).collect();
    let values = aggregate_rows(&rows, method)?;
    Ok(updates[0].with_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn rows_of(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn identical_inputs_are_a_fixed_point() {
        let x = vec![1.5f32, -2.0, 0.25];
        let rows = vec![x.clone(); 5];
        for m in [
            RobustMethod::TrimmedMean { beta: 0.2 },
            RobustMethod::Median,
            RobustMethod::Krum { f: None },
        ] {
            assert_eq!(aggregate_rows(&rows_of(&rows), m).unwrap(), x);
        }
    }

    #[test]
    fn trimmed_mean_drops_a_spike() {
        let mut rng = rng_from_seed(3);
        let mut rows: Vec<Vec<f32>> = (0..5)
            .map(|_| (0..16).map(|_| rng.random::<f32>()).collect())
            .collect();
        rows[2] = vec![1e6; 16];
        let out = aggregate_rows(&rows_of(&rows), RobustMethod::TrimmedMean { beta: 0.2 }).unwrap();
        for j in 0..16 {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j] as f64).collect();
            col.sort_by(|a, b| a.total_cmp(b));
            let oracle = (col[1] + col[2] + col[3]) / 3.0;
            assert!((out[j] as f64 - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn krum_requires_enough_inputs() {
        let rows = vec![vec![0.0f32; 2]; 3];
        assert!(aggregate_rows(&rows_of(&rows), RobustMethod::Krum { f: Some(1) }).is_err());
        assert!(aggregate_rows(&rows_of(&rows), RobustMethod::Krum { f: None }).is_ok());
    }

    #[test]
    fn krum_avoids_the_outlier() {
        let rows = vec![
            vec![0.0f32, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![50.0, 50.0],
            vec![0.1, 0.1],
        ];
        let pick = krum_index(&rows_of(&rows), 1);
        assert_ne!(pick, 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(aggregate_rows(&[], RobustMethod::Median).is_err());
        let rows = vec![vec![0.0f32; 2], vec![0.0; 3]];
        assert!(aggregate_rows(&rows_of(&rows), RobustMethod::Median).is_err());
        let rows = vec![vec![0.0f32; 2]];
        assert!(aggregate_rows(&rows_of(&rows), RobustMethod::TrimmedMean { beta: 0.5 }).is_err());
    }

    proptest! {
        #[test]
        fn median_ignores_one_arbitrary_row(
            half in 1usize..4, seed in any::<u64>(), victim in any::<prop::sample::Index>(), junk in -1e9f32..1e9
        ) {
            let n = 2 * half + 1;
            let mut rng = rng_from_seed(seed);
            let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..8).map(|_| rng.random::<f32>()).collect()).collect();
            let mut attacked = rows.clone();
            attacked[victim.index(n)] = vec![junk; 8];
            let out = aggregate_rows(&rows_of(&attacked), RobustMethod::Median).unwrap();
            // The median stays within the range of the honest values.
            for j in 0..8 {
                let honest: Vec<f32> = rows.iter().enumerate().filter(|(i, _)| *i != victim.index(n)).map(|(_, r)| r[j]).collect();
                let lo = honest.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = honest.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(out[j] >= lo && out[j] <= hi);
            }
        }
    }
}
