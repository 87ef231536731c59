//! Seed derivation and hashing.
//!
//! Every random stream in the pipeline hangs off a single root seed. Child
//! seeds are derived from a textual label so that components can be reproduced
//! independently of each other and of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic, platform-independent random stream.
pub type Stream = ChaCha8Rng;

/// Well-known derivation labels.
pub mod labels {
    pub const SPLIT: &str = "split";
    pub const INIT: &str = "init";
    pub const SHUFFLE: &str = "shuffle";
    pub const DROPOUT: &str = "dropout";
    pub const GENERATION: &str = "generation";
    pub const SAMPLING: &str = "sampling";
}

fn prefix_u64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

/// Child seed for `label`: the first 8 bytes (big-endian) of
/// `sha256("{root}/{label}")`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    prefix_u64(format!("{root}/{label}").as_bytes())
}

/// Maps `(seed, id)` to `[0, 1)`: the top 53 bits of the first 8 bytes of
/// `sha256("{seed}:{id}")`, scaled by 2^-53.
pub fn unit_hash(seed: u64, id: &str) -> f64 {
    let bits = prefix_u64(format!("{seed}:{id}").as_bytes()) >> 11;
    bits as f64 / (1u64 << 53) as f64
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hex-encoded SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
