//! Counter-based random streams.
//!
//! A single user seed is expanded into independent ChaCha streams keyed by
//! `(seed, domain, index)`. Chains, batch elements and training iterations each
//! own a stream, so results do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Stream domains. Distinct domains never share a key.
pub mod domain {
    pub const PRIOR: u64 = 1;
    pub const TARGET: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const PROJECTION: u64 = 5;
    pub const PAIRS: u64 = 6;
    pub const INIT: u64 = 7;
    pub const ROLLOUT: u64 = 8;
    pub const SWEEP: u64 = 9;
    pub const LOSS: u64 = 10;
}

fn key(seed: u64, domain: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"scorelab-stream");
    h.update(seed.to_le_bytes());
    h.update(domain.to_le_bytes());
    let out = h.finalize();
    let mut k = [0u8; 32];
    k.copy_from_slice(&out);
    k
}

/// Returns the random stream `index` within `domain` for `seed`.
pub fn stream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::from_seed(key(seed, domain));
    rng.set_stream(index);
    rng
}

/// Derives a child seed, e.g. one per sweep point or replication.
pub fn child_seed(seed: u64, domain: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(key(seed, domain));
    h.update(index.to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
