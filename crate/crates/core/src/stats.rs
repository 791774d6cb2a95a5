//! Small descriptive statistics shared by the injectors and the detectors.

/// Gaussian consistency factor for the median absolute deviation.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// Median of a slice; `None` when empty. NaNs sort last.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Median absolute deviation about `center`.
pub fn mad(values: &[f64], center: f64) -> Option<f64> {
    let deviations: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    median(&deviations)
}

/// Robust scale (1.4826 x MAD) of an `f32` vector, falling back to the RMS and
/// then to 1.0 when the vector is too degenerate to have a positive scale.
pub fn robust_scale_or_rms(values: &[f32]) -> f64 {
    let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    let m = median(&v).unwrap_or(0.0);
    let scale = MAD_TO_SIGMA * mad(&v, m).unwrap_or(0.0);
    if scale > 0.0 {
        return scale;
    }
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        rms
    } else {
        1.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population kurtosis `E[(x-mu)^4] / sigma^4`; `None` for fewer than four
/// values or zero variance.
pub fn population_kurtosis(values: &[f64]) -> Option<f64> {
    if values.len() < 4 {
        return None;
    }
    let mu = mean(values);
    let n = values.len() as f64;
    let (m2, m4) = values.iter().fold((0.0, 0.0), |(m2, m4), x| {
        let d = x - mu;
        let d2 = d * d;
        (m2 + d2, m4 + d2 * d2)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 <= 0.0 {
        return None;
    }
    Some(m4 / (m2 * m2))
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let mu = mean(values);
    Some(values.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (values.len() - 1) as f64)
}

pub fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}
