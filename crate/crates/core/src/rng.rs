//! Seeded parameter and data streams.
//!
//! Every consumer draws from its own ChaCha stream of the run seed, so the
//! values a parameter gets never depend on what else was initialized first
//! or on which worker hosts it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Half-width of the uniform initialization range for all weights.
pub const INIT_RANGE: f64 = 0.1;

pub const GATE_STREAM: u64 = 0;
/// Stream of global expert `e` is `EXPERT_STREAM_BASE + e`.
pub const EXPERT_STREAM_BASE: u64 = 1;
/// Streams at and above this value are reserved for synthetic data.
pub const DATA_STREAM_BASE: u64 = 1 << 32;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn expert_stream(seed: u64, global_expert: usize) -> ChaCha8Rng {
    stream(seed, EXPERT_STREAM_BASE + global_expert as u64)
}

pub fn data_stream(seed: u64, which: u64) -> ChaCha8Rng {
    stream(seed, DATA_STREAM_BASE + which)
}
