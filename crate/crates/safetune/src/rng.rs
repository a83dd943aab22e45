//! Deterministic random streams.
//!
//! Three kinds of randomness, all derived from the single run seed so any artifact is
//! reproducible from its config alone:
//!
//! * named streams — parameter init and data generation use a ChaCha stream keyed by
//!   (seed, name), so adding/removing a parameter never shifts another one's draws;
//! * counter streams — dropout masks are pure functions of (seed, step, node id, element)
//!   and are regenerated in backward instead of being stored;
//! * plain seeded streams for analysis directions and power-iteration starts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; the standard 64-bit avalanche mix.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a string, used to key per-name streams.
#[inline]
pub fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// ChaCha stream keyed by (seed, name). Stable across runs and parameter-set changes.
pub fn named_stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(hash_name(name))))
}

/// Uniform in [0, 1) from a counter-based stream; used for dropout keep decisions.
/// Pure function of its key: replayable without storing masks.
#[inline]
pub fn counter_uniform(seed: u64, step: u64, node: u64, elem: u64) -> f64 {
    let h = mix64(mix64(mix64(seed ^ 0x5eed).wrapping_add(step) ^ mix64(node)).wrapping_add(elem));
    // 53 high bits -> [0, 1) double.
    (h >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}
