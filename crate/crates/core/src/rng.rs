//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), a portable
//! generator whose output is identical on every platform. A component draws
//! from `stream_rng(seed, stream)`: the 64-bit seed selects the key and the
//! stream id selects one of 2^64 independent ChaCha streams under that key.
//! Stream ids are fixed per component (see the constants below); per-item
//! streams (one per utterance, one per bootstrap replica) add the item index
//! to a component base so they can be generated in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const CLASS_MEANS: u64 = 1;
pub const SPLIT: u64 = 2;
pub const TRIALS: u64 = 3;
pub const INIT: u64 = 4;
pub const BATCHES: u64 = 5;
pub const SCHEDULE: u64 = 6;
pub const ADAPT_BATCHES: u64 = 7;
pub const ADAPT_SCHEDULE: u64 = 8;
pub const ENROL_SAMPLE: u64 = 9;
pub const UTTERANCE_BASE: u64 = 1 << 32;
pub const BOOTSTRAP_BASE: u64 = 2 << 32;

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
