//! Seed derivation.
//!
//! Every random stream in the crate comes from a single top-level seed and a
//! `(task, role, index)` triple. The triple is folded into the seed with the
//! SplitMix64 finalizer, and the result seeds a ChaCha8 generator. The scheme
//! is stable across thread counts because no stream is ever shared.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a label, used to turn task/role names into 64-bit words.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(seed: u64, task: &str, role: &str, index: u64) -> u64 {
    let mut s = mix64(seed);
    s = mix64(s ^ label_hash(task));
    s = mix64(s ^ label_hash(role));
    mix64(s ^ index)
}

pub fn derive_rng(seed: u64, task: &str, role: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, task, role, index))
}
