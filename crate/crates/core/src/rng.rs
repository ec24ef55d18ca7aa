//! Seed derivation: one root seed fans out into independent labeled streams,
//! so adding a consumer never perturbs the draws seen by existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// FNV-1a, used both for seed-stream labels and file checksums.
pub const FNV_OFFSET: u64 = 0xcbf29ce484222325;

pub fn fnv1a_update(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_update(FNV_OFFSET, bytes)
}

/// Derive a deterministic stream for (root, label). Streams with distinct
/// labels are independent; the same pair always yields the same stream.
pub fn seed_stream(root: u64, label: &str) -> ChaCha20Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&root.to_le_bytes());
    seed[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    let mix = fnv1a(&seed[..16]);
    seed[16..24].copy_from_slice(&mix.to_le_bytes());
    seed[24..32].copy_from_slice(&(label.len() as u64).to_le_bytes());
    ChaCha20Rng::from_seed(seed)
}

/// Stable hash for per-index random decisions (policy sampling), so a
/// decision for index i never changes as the range grows.
pub fn index_hash(root: u64, label: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(label.len() + 16);
    buf.extend_from_slice(&root.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a(&buf)
}
