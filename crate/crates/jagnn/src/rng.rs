//! Deterministic RNG derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream keyed by
//! `(seed, stream, node)` so that concurrent callers never share state and
//! identical configs reproduce bit-identical results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag mixed into the derived key; keeps independent uses of the same
/// `(seed, node)` pair from correlating.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    HypernodeCap = 1,
    RandomAugment = 2,
    ParamInit = 3,
    BatchShuffle = 4,
    Synth = 5,
}

/// Derive an independent RNG from `(seed, stream, node)`.
pub fn derive(seed: u64, stream: Stream, node: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&mix(seed).to_le_bytes());
    key[8..16].copy_from_slice(&mix(seed ^ 0x9e37_79b9_7f4a_7c15).to_le_bytes());
    key[16..24].copy_from_slice(&mix(stream as u64).to_le_bytes());
    key[24..32].copy_from_slice(&mix(node).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

// splitmix64 finalizer
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
