//! Reproducible random streams for parallel generation.
//!
//! Every generated response owns an independent counter-based stream
//! (ChaCha8) derived from `(run_seed, sample_id, response_index)`, so
//! results do not depend on worker scheduling or generation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes the three stream coordinates into a single 64-bit seed.
///
/// SplitMix64 finalizer applied to each coordinate in turn; collisions
/// between distinct (run, sample, response) triples are negligible.
pub fn derive_seed(run_seed: u64, sample_id: u64, response_index: u64) -> u64 {
    let mut z = run_seed;
    for salt in [sample_id, response_index, 0x9e37_79b9_7f4a_7c15] {
        z = z.wrapping_add(salt).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Stream for one generated response.
pub fn response_stream(run_seed: u64, sample_id: u64, response_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(run_seed, sample_id, response_index))
}

/// Stream from an already-derived seed (used when replaying a record).
pub fn stream_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
