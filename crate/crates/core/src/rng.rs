//! Deterministic random streams derived from a single master seed.
//!
//! Every consumer (truth generation, noise, each annealing initialization,
//! each walker) draws from its own ChaCha stream, addressed by a stage tag
//! and an index, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Truth = 1,
    Noise = 2,
    AnnealInit = 3,
    Walker = 4,
    Test = 15,
}

pub fn stream(seed: u64, stage: Stage, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 48) | index);
    rng
}
