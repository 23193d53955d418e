//! Counter-based random number derivation.
//!
//! Every random draw in this crate is keyed by `(seed, stream, index)` and
//! served by a fresh cipher RNG, so results never depend on evaluation order
//! or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step, the standard 64-bit mixer.
#[must_use]
pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic RNG for one `(seed, stream, index)` key.
#[must_use]
pub(crate) fn keyed_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let k = splitmix(splitmix(splitmix(seed) ^ stream) ^ index);
    ChaCha8Rng::seed_from_u64(k)
}
