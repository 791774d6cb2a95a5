//! Exponential moving average of the history as a last-resort fill.

use crate::error::{EmarError, Result};
use crate::update::{HistoryWindow, IndexSets, ModelUpdate};

/// `EMA_1 = W_1`, `EMA_t = beta * EMA_{t-1} + (1 - beta) * W_t` over rows in
/// chronological order.
pub fn ema_rows(rows: &[&[f32]], beta: f64) -> Result<Vec<f64>> {
    let first = rows.first().ok_or(EmarError::EmptyHistory)?;
    let mut ema: Vec<f64> = first.iter().map(|&v| v as f64).collect();
    for row in &rows[1..] {
        for (e, &v) in ema.iter_mut().zip(row.iter()) {
            *e = beta * *e + (1.0 - beta) * v as f64;
        }
    }
    Ok(ema)
}

/// Replace the corrupted coordinates of `values` by the history EMA.
pub fn ema_fill(values: &[f32], sets: &IndexSets, rows: &[&[f32]], beta: f64) -> Result<Vec<f32>> {
    if sets.corrupted().is_empty() {
        return Ok(values.to_vec());
    }
    let ema = ema_rows(rows, beta)?;
    if ema.len() != values.len() {
        return Err(EmarError::DimensionMismatch {
            expected: values.len(),
            actual: ema.len(),
        });
    }
    let mut out = values.to_vec();
    for &j in sets.corrupted() {
        out[j] = ema[j] as f32;
    }
    Ok(out)
}

pub fn ema_fallback(
    received: &ModelUpdate,
    sets: &IndexSets,
    window: &HistoryWindow,
    beta: f64,
) -> Result<ModelUpdate> {
    let rows: Vec<&[f32]> = window.entries().collect();
    Ok(received.with_values(ema_fill(&received.values, sets, &rows, beta)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_history_is_a_fixed_point() {
        let rows = [[3.0f32, 1.0], [3.0, 2.0], [3.0, 5.0]];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let sets = IndexSets::from_corrupted(2, [0]).unwrap();
        let out = ema_fill(&[100.0, 7.0], &sets, &refs, 0.8).unwrap();
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn clean_input_is_untouched() {
        let refs: Vec<&[f32]> = vec![];
        assert_eq!(
            ema_fill(&[1.0, 2.0], &IndexSets::all_clean(2), &refs, 0.8).unwrap(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn ramp_matches_direct_recurrence() {
        let rows = [[1.0f32], [2.0], [3.0], [4.0]];
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut oracle = 1.0f64;
        for x in [2.0, 3.0, 4.0] {
            oracle = 0.8 * oracle + 0.2 * x;
        }
        let ema = ema_rows(&refs, 0.8).unwrap();
        assert!((ema[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_history_is_an_error() {
        let window = HistoryWindow::new(3).unwrap();
        let w = ModelUpdate::new(vec![1.0, 2.0], 0, 0);
        let sets = IndexSets::from_corrupted(2, [1]).unwrap();
        assert!(matches!(
            ema_fallback(&w, &sets, &window, 0.8),
            Err(EmarError::EmptyHistory)
        ));
    }
}
