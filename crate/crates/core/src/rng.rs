//! Named random sub-streams derived from a single experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// FNV-1a, used only to turn a stream name into seed bits.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for the sub-stream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mixed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(name.as_bytes());
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Seed for a component that owns its own generators.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    use rand::RngCore;
    stream(seed, name).next_u64()
}
