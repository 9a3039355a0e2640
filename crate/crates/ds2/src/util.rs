//! Small shared helpers: deterministic seed derivation and hashing.

use sha2::{Digest, Sha256};

/// splitmix64 finalizer; the standard way we turn (seed, index...) tuples
/// into independent per-unit RNG seeds that are stable across thread counts.
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and up to two indices.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(a)) ^ splitmix64(b ^ 0x5851_f42d_4c95_7f2d))
}

/// Hex-encoded SHA-256 of a byte slice.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)
}

/// First 8 bytes of SHA-256 as a u64, for seeding RNGs from text.
pub(crate) fn sha256_seed(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
