//! Named, independent random streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator for the sub-stream `name` of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(substream_key(seed, name))
}

/// 64-bit seed for the sub-stream `name`, for APIs that take an integer.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    let key = substream_key(seed, name);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}

fn substream_key(seed: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}
