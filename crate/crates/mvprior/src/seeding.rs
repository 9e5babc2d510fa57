//! Deterministic seed derivation.
//!
//! Every random choice in the crate flows from named seeds in the
//! experiment config. Derived sub-seeds (per bootstrap replica, per
//! repetition, per split) come from this one splitmix-style mixer so runs
//! are reproducible bit-for-bit and independent streams do not collide.

/// Derives a child seed from a base seed and a salt (replica index,
/// repetition index, purpose code, ...).
pub fn derive(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined state.
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
