//! Seed derivation. Every random stream in a run descends from the single
//! root seed of the run configuration:
//!
//! ```text
//! child = splitmix64(parent ^ fnv1a64(label))
//! ```
//!
//! Labels in use: `"init"` (weights), `"data"` and `"data-test"` (synthetic
//! splits), `"shuffle"` + epoch (batch order), `"views"` + step (per-image
//! augmentation), `"dropout"` + step, `"probe"` and `"probe-epoch"` (linear
//! evaluation).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(parent: u64, label: &str) -> u64 {
    splitmix64(parent ^ fnv1a(label))
}

pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(parent, label) ^ splitmix64(index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
