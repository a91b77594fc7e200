//! Seed derivation. Every random stream in a run is keyed by the master seed
//! plus a domain tag and indices, so streams never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Partition = 2,
    Holdout = 3,
    Cohort = 4,
    LocalTrain = 5,
    Synth = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `master`, a stream tag and two indices into a 64-bit seed.
pub fn derive_seed(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ stream as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
