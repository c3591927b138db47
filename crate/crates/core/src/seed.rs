//! Seed derivation. Every stochastic step draws from a ChaCha stream whose
//! seed is derived from a root seed plus the step's coordinates, so results
//! never depend on execution order.

/// SplitMix64 finalizer applied to `a` combined with `b`.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of coordinates into one seed.
pub fn derive(root: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(root, 0x5EED), |acc, &p| mix(acc, p))
}
