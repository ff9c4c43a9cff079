//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha20 keyed by a user seed
//! via `seed_from_u64`, with an independent 64-bit stream id per consumer.
//! A consumer owning stream `k` sees the same numbers no matter which other
//! streams were drawn before it, so generation order never changes output.
//!
//! Stream id layout:
//!
//! | ids                       | consumer                          |
//! |---------------------------|-----------------------------------|
//! | `0..16`                   | dataset strata / groups, in order |
//! | [`INIT_STREAM`]           | network weight initialization     |
//! | [`BATCH_STREAM`]          | training mini-batches             |
//! | [`TRAJECTORY_BASE`] `+ i` | initial state of trajectory `i`   |
//! | [`THEORY_STREAM`]         | theory test-point generation      |

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

pub const INIT_STREAM: u64 = 1 << 32;
pub const BATCH_STREAM: u64 = (1 << 32) + 1;
pub const THEORY_STREAM: u64 = (1 << 32) + 2;
pub const TRAJECTORY_BASE: u64 = 1 << 40;

/// The generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
