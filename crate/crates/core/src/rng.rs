//! Seeded substreams. One master seed fans out into independent ChaCha
//! streams so that topology, shadowing, arrivals and Monte Carlo draws never
//! share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub const TOPOLOGY: u64 = 1;
pub const SHADOWING: u64 = 2;
pub const ARRIVALS: u64 = 3;
pub const MONTE_CARLO: u64 = 4;
pub const INSTANCES: u64 = 5;
pub const MC_NORMALIZATION: u64 = 6;

/// Independent stream `id` derived from `seed`.
pub fn substream(seed: u64, id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream for one item of an indexed family (e.g. one Monte Carlo
/// realization), reproducible regardless of evaluation order.
pub fn indexed(seed: u64, family: u64, index: u64) -> Stream {
    substream(seed, (family << 40) | index)
}
