//! Deterministic random streams.
//!
//! Every stochastic step draws from a ChaCha20 generator whose 256-bit key is
//! the SplitMix64 expansion of `(seed, client, round, stream)`. The generator
//! and the key schedule are both fixed, so a given tuple reproduces the same
//! bit stream on any platform and in any implementation that follows the same
//! schedule:
//!
//! ```text
//! state = seed
//! for word in [client, round, stream]: state = splitmix(state ^ splitmix(word))
//! key[i] = splitmix(state + i * GOLDEN)   for i in 0..4, little-endian
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 output for the given state.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named streams. The discriminant is part of the key schedule, so the
/// values must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    TaskData = 1,
    Training = 2,
    TransmitNoise = 3,
    CorruptionSchedule = 4,
    RandomNoise = 10,
    Burst = 11,
    Missing = 12,
    HeavyTail = 13,
    SignFlip = 14,
    Channel = 20,
    Retransmit = 21,
    LocalDp = 30,
    CentralDp = 31,
    SecureAggMask = 32,
}

/// Derive a 64-bit sub-seed for `(seed, client, round, stream)`.
pub fn derive_seed(seed: u64, client: u64, round: u64, stream: u64) -> u64 {
    let mut state = seed;
    for word in [client, round, stream] {
        state = splitmix64(state ^ splitmix64(word));
    }
    state
}

/// A ChaCha20 generator keyed from a single 64-bit seed.
pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        let word = splitmix64(seed.wrapping_add((i as u64).wrapping_mul(GOLDEN)));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

/// Generator for a named stream of one `(client, round)` cell.
pub fn stream_rng(seed: u64, client: u64, round: u64, stream: Stream) -> ChaCha20Rng {
    rng_from_seed(derive_seed(seed, client, round, stream as u64))
}
