//! Keyed deterministic randomness.
//!
//! Every random quantity in the crate is addressed by a structured key
//! (run seed, member, mask index, layer, unit, ...) instead of being drawn
//! from a shared sequential stream. Results therefore do not depend on the
//! order in which work is scheduled or on the number of worker threads.
//!
//! Two primitives cover all uses:
//! - [`derive`] folds a key into a 64-bit seed; [`uniform`] maps a key to a
//!   single draw in `[0, 1)` for per-element quantities such as mask bits.
//! - [`stream`] seeds a ChaCha8 generator for sequential draws inside one
//!   keyed job (initialization, shuffling, projection columns).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a tuple of words into one seed. Position-sensitive: `[a, b]` and
/// `[b, a]` give unrelated results.
#[inline]
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ splitmix(p.wrapping_add(GOLDEN)));
    }
    h
}

/// Stable 64-bit FNV-1a hash of a name, used to key per-layer streams.
pub fn name_key(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Single uniform draw in `[0, 1)` addressed by a key.
#[inline]
pub fn uniform(seed: u64, parts: &[u64]) -> f64 {
    (derive(seed, parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential generator for one keyed job.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Domain tags so that different uses of the same numeric key never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SUBSET: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TRAIN_DROPOUT: u64 = 4;
    pub const MASK: u64 = 5;
    pub const PROJECTION: u64 = 6;
    pub const LORA_INIT: u64 = 7;
    pub const LORA_SUBSET: u64 = 8;
    pub const MEMBER: u64 = 9;
    pub const GROUND_TRUTH: u64 = 10;
    pub const DATA: u64 = 11;
    pub const UNIT: u64 = 12;
}
