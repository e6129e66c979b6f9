//! Seed derivation. All randomness in the crate flows from `ChaCha8Rng`
//! streams whose seeds are derived here, so results depend only on the
//! run seed and the (epoch, sample) coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for a (seed, epoch, sample) triple; used for augmentation.
pub fn sample_stream(seed: u64, epoch: u32, sample_id: u32) -> ChaCha8Rng {
    let key = mix64(mix64(seed ^ 0xA5A5_0000_0000_0000) ^ ((epoch as u64) << 32 | sample_id as u64));
    ChaCha8Rng::seed_from_u64(key)
}
