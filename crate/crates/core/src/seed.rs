//! Deterministic sub-seeds, so that per-item random streams do not depend on
//! iteration order or thread scheduling.

use sha2::{Digest, Sha256};

/// Seed for the stream identified by `key` under `base`.
pub fn derive_seed(base: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn derive_seed_index(base: u64, index: u64) -> u64 {
    derive_seed(base, &index.to_string())
}
