//! Deterministic PRNG stream derivation.
//!
//! Every random decision in the crate draws from a ChaCha stream derived
//! from a global seed plus a path of context ids (model index, batch id,
//! iteration, round). Streams are independent of thread scheduling, so
//! parallel runs reproduce the sequential results bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard seed-spreading finalizer.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed and a path of context ids into a single 64-bit stream id.
pub fn stream_id(seed: u64, path: &[u64]) -> u64 {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let mut acc = splitmix64(&mut state);
    for &p in path {
        state ^= p;
        acc ^= splitmix64(&mut state).rotate_left(17);
    }
    acc
}

/// Derive an independent ChaCha stream for (seed, context path).
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_id(seed, path))
}
