//! Cloud aggregation: clip, mask, securely average, add central noise.

use rand::Rng;

use crate::error::{EmarError, Result};
use crate::privacy::{
    add_central_dp_noise, clip_update, mask_for_secure_agg, secure_aggregate, ClipParams,
    PrivacyLedger,
};
use crate::update::ModelUpdate;

/// Apply one round of accepted updates to `global`. Returns the advanced
/// ledger, or `None` (and leaves `global` alone) when nothing was accepted.
pub fn cloud_round<R: Rng + ?Sized>(
    global: &mut [f64],
    accepted: &[ModelUpdate],
    clip: &ClipParams,
    ledger: &PrivacyLedger,
    round: u32,
    shared_seed: u64,
    rng: &mut R,
) -> Result<Option<PrivacyLedger>> {
    if accepted.is_empty() {
        return Ok(None);
    }
    if let Some(bad) = accepted.iter().find(|u| u.dim() != global.len()) {
        return Err(EmarError::DimensionMismatch {
            expected: global.len(),
            actual: bad.dim(),
        });
    }
    let participants: Vec<u16> = accepted.iter().map(|u| u.client_id).collect();
    let masked = accepted
        .iter()
        .map(|u| {
            let clipped = clip_update(u, clip);
            mask_for_secure_agg(
                &clipped.values,
                u.client_id,
                &participants,
                round,
                shared_seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let average = secure_aggregate(&masked, &participants)?;
    let (noisy, next) = add_central_dp_noise(&average, ledger, rng);
    for (g, a) in global.iter_mut().zip(noisy) {
        *g += a;
    }
    Ok(Some(next))
}
