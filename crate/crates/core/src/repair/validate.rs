//! Consistency gate applied to every repair candidate.

use crate::update::IndexSets;

/// `Delta = ||(repaired - received)_Omega|| / ||received_Omega||`, falling
/// back to the raw norm when the denominator vanishes. Accepted iff
/// `Delta < delta_val`.
pub fn validate(
    repaired: &[f32],
    received: &[f32],
    sets: &IndexSets,
    delta_val: f64,
) -> (f64, bool) {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for &j in sets.clean() {
        let r = received[j] as f64;
        let t = repaired[j] as f64 - r;
        num += t * t;
        den += r * r;
    }
    let delta = if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    };
    (delta, delta < delta_val)
}
