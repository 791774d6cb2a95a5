//! Clipping, pairwise-masked secure aggregation, central Gaussian noise and
//! zCDP accounting.

pub mod dp;
pub mod secagg;

pub use dp::{
    account_privacy, add_central_dp_noise, add_gaussian_noise, sigma_for_epsilon, zcdp_epsilon,
    PrivacyLedger,
};
pub use secagg::{dequantize, mask_for_secure_agg, quantize, secure_aggregate, MaskedUpdate};

use crate::error::{EmarError, Result};
use crate::update::ModelUpdate;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipParams {
    pub clip_norm: f64,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self { clip_norm: 1.5 }
    }
}

impl ClipParams {
    pub fn new(clip_norm: f64) -> Result<Self> {
        if !(clip_norm > 0.0) || !clip_norm.is_finite() {
            return Err(EmarError::invalid(format!(
                "clip norm {clip_norm} must be positive"
            )));
        }
        Ok(Self { clip_norm })
    }
}

/// Scale `values` down to L2 norm at most `C`.
pub fn clip_values(values: &[f32], params: &ClipParams) -> Vec<f32> {
    let c = params.clip_norm;
    let norm = crate::stats::l2_norm(values);
    if norm <= c {
        return values.to_vec();
    }
    let mut scale = c / norm;
    loop {
        let out: Vec<f32> = values.iter().map(|&v| (v as f64 * scale) as f32).collect();
        // f32 rounding can push the norm a hair above C.
        if crate::stats::l2_norm(&out) <= c + 1e-9 {
            return out;
        }
        scale *= 1.0 - 1e-7;
    }
}

pub fn clip_update(w: &ModelUpdate, params: &ClipParams) -> ModelUpdate {
    w.with_values(clip_values(&w.values, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn halves_a_norm_three_vector() {
        let w = ModelUpdate::new(vec![2.0, 2.0, 1.0], 0, 0);
        let out = clip_update(&w, &ClipParams::default());
        for (a, b) in out.values.iter().zip(&w.values) {
            assert!((a - b / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn short_vectors_are_untouched() {
        let w = ModelUpdate::new(vec![0.5, -0.5], 0, 0);
        assert_eq!(clip_update(&w, &ClipParams::default()), w);
    }

    #[test]
    fn clipped_norm_never_exceeds_bound() {
        let mut rng = rng_from_seed(11);
        let p = ClipParams::default();
        for _ in 0..1000 {
            let d = rng.random_range(1..300);
            let scale = rng.random_range(0.0..50.0);
            let v: Vec<f32> = (0..d)
                .map(|_| (rng.random::<f32>() - 0.5) * scale)
                .collect();
            assert!(crate::stats::l2_norm(&clip_values(&v, &p)) <= 1.5 + 1e-9);
        }
    }

    #[test]
    fn rejects_non_positive_norm() {
        assert!(ClipParams::new(0.0).is_err());
        assert!(ClipParams::new(f64::NAN).is_err());
    }
}
