//! Pairwise additive masking over `Z / 2^62` with fixed-point encoding.
//!
//! Each value is encoded as `round(v * 2^20)` and reduced mod 2^62. For every
//! pair `i < j` of participants a mask stream keyed by `(seed, i, j, round)`
//! is added to `i` and subtracted from `j`, so the masks cancel exactly in the
//! modular sum.

use rand::RngCore;

use crate::error::{EmarError, Result};
use crate::rng::rng_from_seed;

pub const FRAC_BITS: u32 = 20;
pub const MODULUS_BITS: u32 = 62;
const MODULUS_MASK: u64 = (1u64 << MODULUS_BITS) - 1;
/// Quantized magnitudes must stay below `2^41`.
pub const MAX_QUANTIZED: f64 = (1u64 << 41) as f64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedUpdate {
    pub masked_values: Vec<u64>,
    pub client_id: u16,
    pub round: u32,
}

/// Encode one value as a residue mod 2^62.
pub fn quantize(v: f32) -> Result<u64> {
    let q = (v as f64 * (1u64 << FRAC_BITS) as f64).round();
    if !q.is_finite() || q.abs() >= MAX_QUANTIZED {
        return Err(EmarError::QuantizationOverflow { value: v as f64 });
    }
    Ok((q as i64 as u64) & MODULUS_MASK)
}

/// Decode a residue as a signed fixed-point number.
pub fn dequantize(r: u64) -> f64 {
    let r = r & MODULUS_MASK;
    let signed = if r >= 1u64 << (MODULUS_BITS - 1) {
        r as i64 - (1i64 << MODULUS_BITS)
    } else {
        r as i64
    };
    signed as f64 / (1u64 << FRAC_BITS) as f64
}

fn pair_seed(shared_seed: u64, i: u16, j: u16, round: u32) -> u64 {
    crate::rng::derive_seed(
        shared_seed,
        ((i as u64) << 16) | j as u64,
        round as u64,
        crate::rng::Stream::SecureAggMask as u64,
    )
}

/// Mask `values` for `client_id` among `participants`.
pub fn mask_for_secure_agg(
    values: &[f32],
    client_id: u16,
    participants: &[u16],
    round: u32,
    shared_seed: u64,
) -> Result<MaskedUpdate> {
    if !participants.contains(&client_id) {
        return Err(EmarError::invalid(format!(
            "client {client_id} is not a participant"
        )));
    }
    let mut masked: Vec<u64> = values.iter().map(|&v| quantize(v)).collect::<Result<_>>()?;
    for &other in participants {
        if other == client_id {
            continue;
        }
        let (lo, hi) = (client_id.min(other), client_id.max(other));
        let mut rng = rng_from_seed(pair_seed(shared_seed, lo, hi, round));
        let add = client_id == lo;
        for m in masked.iter_mut() {
            let mask = rng.next_u64() & MODULUS_MASK;
            *m = if add {
                m.wrapping_add(mask) & MODULUS_MASK
            } else {
                m.wrapping_sub(mask) & MODULUS_MASK
            };
        }
    }
    Ok(MaskedUpdate {
        masked_values: masked,
        client_id,
        round,
    })
}

/// Sum masked updates mod 2^62, decode, and divide by `participants.len()`.
/// Every participant must be present.
pub fn secure_aggregate(masked: &[MaskedUpdate], participants: &[u16]) -> Result<Vec<f64>> {
    for p in participants {
        if !masked.iter().any(|m| m.client_id == *p) {
            return Err(EmarError::AbortedRound(format!(
                "participant {p} sent no masked update"
            )));
        }
    }
    if masked.len() != participants.len() {
        return Err(EmarError::AbortedRound(format!(
            "{} masked updates for {} participants",
            masked.len(),
            participants.len()
        )));
    }
    let d = masked[0].masked_values.len();
    if masked.iter().any(|m| m.masked_values.len() != d) {
        return Err(EmarError::invalid("masked updates differ in length"));
    }
    let n = participants.len() as f64;
    Ok((0..d)
        .map(|j| {
            let sum = masked.iter().fold(0u64, |acc, m| {
                acc.wrapping_add(m.masked_values[j]) & MODULUS_MASK
            });
            dequantize(sum) / n
        })
        .collect())
}
