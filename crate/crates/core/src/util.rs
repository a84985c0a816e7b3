//! Small shared helpers: seeded normal draws and named sub-seed
//! derivation so every source of randomness flows from one root seed.

use rand::Rng;

/// Standard normal draw via Box-Muller.
pub fn randn(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Stable FNV-1a hash of a sub-seed name mixed into the root seed.
/// Unlike `DefaultHasher` this never changes across toolchains.
pub fn sub_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    root ^ h
}
