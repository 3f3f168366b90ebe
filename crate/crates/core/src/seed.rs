//! Named-stream seed derivation.
//!
//! Every random draw in the crate descends from a single master seed. A child
//! stream is identified by a name (and optionally an index), so adding a new
//! consumer never perturbs the values seen by existing ones:
//!
//! ```text
//! child = splitmix64(master ^ fnv1a64(name) ^ splitmix64(index))
//! ```
//!
//! The generator behind every stream is ChaCha8, seeded through
//! `SeedableRng::seed_from_u64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the child stream `name` under `master`.
pub fn derive(master: u64, name: &str) -> u64 {
    derive_indexed(master, name, 0)
}

/// Seed of the `index`-th member of the child stream family `name`.
pub fn derive_indexed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a64(name) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
