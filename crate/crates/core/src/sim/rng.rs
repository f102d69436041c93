//! Counter-based randomness: every draw comes from a generator keyed by
//! (seed, tick, subject), so one subject's stream never depends on how many
//! other subjects exist or in what order they were stepped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Stable 64-bit key for (seed, tick, subject).
pub fn stream_key(seed: u64, tick: u64, subject: &str) -> u64 {
    let hash = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    let hash = fnv1a(hash, &tick.to_le_bytes());
    fnv1a(hash, subject.as_bytes())
}

pub fn subject_rng(seed: u64, tick: u64, subject: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, tick, subject))
}
