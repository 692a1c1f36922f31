//! Seed derivation and hashing helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a 64-bit hash. Used for run manifests and episode pairing digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from a root seed, a domain tag, and a counter.
///
/// The counter-based scheme keeps independent consumers (episode k, init,
/// augmentation) on disjoint deterministic streams.
pub fn subseed(root: u64, domain: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(16 + domain.len());
    buf.extend_from_slice(&root.to_le_bytes());
    buf.extend_from_slice(domain.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&buf)
}

/// The crate's reference RNG, seeded from a derived subseed.
pub fn rng_for(root: u64, domain: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(root, domain, index))
}
