//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by the global seed plus a path of labels, so workers can
//! derive independent streams without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

pub fn rng_for(seed: u64, parts: &[&str]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Hex SHA-256 of a byte stream.
pub fn hex_digest(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}
