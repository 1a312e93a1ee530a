//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a [`ChaCha8Rng`] built by
//! [`stream`]. A stream is identified by a 64-bit seed and a stream id, so
//! one seed can feed several independent consumers (latent batches, data
//! indices, initialization) without them sharing state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids used inside the crate. Callers may use any other value.
pub mod streams {
    pub const SAMPLE: u64 = 0;
    pub const INIT: u64 = 1;
    pub const LATENT: u64 = 2;
    pub const DATA_INDEX: u64 = 3;
    pub const RANDOM_PSD: u64 = 4;
}

pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Deterministically mixes a parent seed with a child index (splitmix64
/// finalizer), for deriving per-job seeds in sweeps.
pub fn derive_seed(parent: u64, child: u64) -> u64 {
    let mut z = parent ^ child.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
