//! Deterministic stream derivation. Every randomized component gets its own
//! ChaCha stream keyed by sha256 over the scenario seed and a label.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub fn derive(seed: u64, label: &str, parts: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u32).to_le_bytes());
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    h.finalize().into()
}

pub fn rng(seed: u64, label: &str, parts: &[u64]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive(seed, label, parts))
}

pub fn hash_u64(seed: u64, label: &str, parts: &[u64]) -> u64 {
    let d = derive(seed, label, parts);
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}
