//! Seed derivation. Every random stream in a run (initialisation, epoch
//! shuffles, per-sample dropout masks, synthetic data) is derived from one
//! run seed, so results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeedRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a run seed with a stream tag and two indices into a child seed.
pub fn derive(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ splitmix(stream)) ^ a) ^ b.rotate_left(17))
}
