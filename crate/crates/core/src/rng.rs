//! Named random sub-streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Independent generator for `name` under `seed`; adding or removing other
/// streams never shifts this one.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
