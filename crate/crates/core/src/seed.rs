//! Deterministic seed derivation.
//!
//! Every stochastic component in the crate takes an explicit `u64` seed and
//! derives sub-seeds through SHA-256 rather than by ad-hoc arithmetic, so
//! independent streams (per-epoch shuffles, per-query noise, per-session
//! dropout sampling) never collide or correlate.

use sha2::{Digest, Sha256};

/// Derive a sub-seed from a base seed and a list of u64 components.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
}

/// Derive a sub-seed mixing in a string label (session ids, file tags).
pub fn derive_labeled(base: u64, label: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has at least 8 bytes"))
}
