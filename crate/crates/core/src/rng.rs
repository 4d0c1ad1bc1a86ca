//! Seeded random streams.
//!
//! Every consumer of randomness (actor, assignment, evaluation, bootstrap
//! resample) gets its own ChaCha stream derived from a run seed and a stream
//! id, so results do not depend on the order in which streams are drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids reserved for harness roles. Actor streams use `ACTOR_BASE + actor`.
pub mod ids {
    pub const INIT: u64 = 1;
    pub const ASSIGN: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const ACTOR_BASE: u64 = 1 << 20;
}
