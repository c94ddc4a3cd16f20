//! Seeded, portable random streams.
//!
//! Every random draw in the toolkit comes from ChaCha8, a counter-based
//! generator with a platform-independent output sequence. A `(seed, stream)`
//! pair names one independent sub-stream; work split across threads derives
//! its streams with [`substream`] so results depend only on the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The `stream`-th independent sub-stream of `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
