//! Seed derivation for nested deterministic pipelines.
//!
//! Every randomized stage takes a single `u64` seed. Stages that fan out
//! (per-sample trigger placement, per-shadow-model training, per-sweep-cell
//! runs) derive child seeds with [`derive_seed`] so results do not depend on
//! scheduling or iteration order.

/// SplitMix64 finalizer. Platform-independent integer mixing.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent child seed for stream `stream` of a stage seeded
/// with `base`. Distinct streams give decorrelated seeds; the same
/// `(base, stream)` pair always gives the same child.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}
