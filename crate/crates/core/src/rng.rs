//! Deterministic seed derivation.
//!
//! Every stage, stream, and per-sample generator in the crate draws from its
//! own ChaCha RNG seeded through [`derive_seed`], so adding or removing one
//! consumer never shifts another consumer's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer-based mixing of a base seed with stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &tag in tags {
        state = state.wrapping_add(tag).wrapping_add(0x9e37_79b9_7f4a_7c15);
        state = splitmix(state);
    }
    splitmix(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fresh deterministic generator for a tagged sub-stream.
pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
