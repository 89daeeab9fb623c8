//! Seeded random streams.
//!
//! Every random operation takes an explicit `u64` seed and draws from its own
//! ChaCha8 stream, so results never depend on call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids. Distinct ids give independent sequences for the same seed.
pub mod stream {
    pub const SPECKLE: u64 = 1;
    pub const OFFSETS: u64 = 2;
    pub const OFFSETS_B: u64 = 3;
    pub const EXPOSURE: u64 = 10;
    pub const TRANSLATION: u64 = 11;
    pub const POISSON: u64 = 12;
    pub const ROUTING: u64 = 20;
}

/// One step of the SplitMix64 generator.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for Monte Carlo run `index`: `splitmix64(seed ^ index)`.
pub fn run_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ index)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
