//! Deterministic random-number streams.
//!
//! All randomness in the crate descends from a single 64-bit master seed
//! through one documented splitting rule, so results are bit-reproducible
//! regardless of thread count or execution order:
//!
//! ```text
//! stream(master, tag, index) = ChaCha12(seed = LE bytes of
//!     [mix(master ^ TAG_SALT[tag]), mix(master + index),
//!      mix(index ^ TAG_SALT[tag]), mix(master ^ rotl(index, 17))])
//! ```
//!
//! where `mix` is the SplitMix64 finalizer. Distinct `(tag, index)` pairs
//! yield statistically independent streams; the same triple always yields the
//! same stream. The harness assigns `index = trial` for simulation streams
//! and `index = trial * 2^16 + filter_slot` for filter-internal noise, so
//! adding or removing filters never perturbs the simulated data.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Role of a random stream; part of the stream-splitting key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    /// Hidden-state path simulation.
    Signal,
    /// Gaussian observation noise.
    GaussianObs,
    /// Point-process event generation.
    PointProcessObs,
    /// Discrete observation symbols.
    SymbolObs,
    /// Particle-filter internals (proposal noise, resampling).
    FilterNoise,
    /// Anything test- or example-local.
    Scratch,
}

impl StreamTag {
    fn salt(self) -> u64 {
        // Arbitrary fixed odd constants; changing any would silently change
        // every simulated dataset, so they are frozen.
        match self {
            StreamTag::Signal => 0x9e37_79b9_7f4a_7c15,
            StreamTag::GaussianObs => 0xbf58_476d_1ce4_e5b9,
            StreamTag::PointProcessObs => 0x94d0_49bb_1331_11eb,
            StreamTag::SymbolObs => 0xd6e8_feb8_6659_fd93,
            StreamTag::FilterNoise => 0xa076_1d64_78bd_642f,
            StreamTag::Scratch => 0xe703_7ed1_a0b4_28db,
        }
    }
}

/// SplitMix64 finalizer: a bijective avalanche mix on 64 bits.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the independent random stream for `(master, tag, index)`.
///
/// This is the only constructor of RNGs used by the crate's simulators,
/// filters, and harness; see the module docs for the exact rule.
pub fn stream(master: u64, tag: StreamTag, index: u64) -> ChaCha12Rng {
    let salt = tag.salt();
    let words = [
        mix(master ^ salt),
        mix(master.wrapping_add(index)),
        mix(index ^ salt),
        mix(master ^ index.rotate_left(17)),
    ];
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

/// Collapses `(master, tag, index)` to a single 64-bit seed for APIs that
/// take a scalar seed (e.g. the simulate functions). Uses the same mixing
/// chain as [`stream`], so scalar-seeded consumers inherit the independence
/// guarantees.
pub fn derive_seed(master: u64, tag: StreamTag, index: u64) -> u64 {
    mix(mix(master ^ tag.salt()) ^ index.rotate_left(32).wrapping_add(index))
}
