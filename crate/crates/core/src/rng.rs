//! Named random substreams derived from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a random stream. Each purpose owns a disjoint block of
/// ChaCha stream ids, indexed by start, replicate, etc.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Starts = 1,
    Bootstrap = 2,
    Simulation = 3,
}

/// Independent generator for `(seed, purpose, index)`.
pub fn substream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}
