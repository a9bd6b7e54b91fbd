//! Counter-based random streams.
//!
//! Every (seed, unit, tag) triple owns an independent ChaCha stream, so a
//! unit's draws do not depend on how many units are simulated or in which
//! order they are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const TAG_LATENT: u64 = 1;
pub(crate) const TAG_TREATMENT: u64 = 2;
pub(crate) const TAG_NOISE: u64 = 3;
pub(crate) const TAG_INNOVATION: u64 = 4;

/// SplitMix64 finalizer applied to a pair of words.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn unit_stream(seed: u64, unit: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix(unit, tag));
    rng
}
