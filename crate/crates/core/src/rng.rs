//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from one master seed, split per
//! subsystem by fixed string labels and an index. The mixing function is
//! fixed here (splitmix64 over an FNV-1a label hash) so streams are stable
//! across platforms and releases, unlike `std`'s hashers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label)) ^ splitmix64(index.wrapping_mul(0x9e37_79b9)))
}

/// A ChaCha stream for the given `(master, label, index)` triple.
pub fn stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, index))
}

/// Standard normal sample via Box-Muller; consumes two uniforms per call.
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
