//! Named deterministic RNG sub-streams.
//!
//! Every random stage derives its generator from the master seed and a label
//! such as `"bootstrap/7"`. Adding a pipeline stage therefore never shifts the
//! draws of another stage, and any stage can be replayed in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

fn digest(master: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

/// RNG for the sub-stream named `label` under `master`.
pub fn stream(master: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(digest(master, label))
}

/// A single deterministic 64-bit value for `label` under `master`.
/// Used for per-(cell, applicant) tie-break keys.
pub fn derive_u64(master: u64, label: &str) -> u64 {
    let bytes = digest(master, label);
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}

/// A derived master seed for a named pipeline stage.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    derive_u64(master, label)
}
