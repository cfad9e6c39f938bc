//! Small shared helpers: seeded RNG streams and content digests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent deterministic stream for one concern of a run.
///
/// Keeping per-concern streams (init, shuffling, augmentation, …) means an
/// optional consumer such as augmentation can draw freely without shifting
/// the draws of every other consumer, which is what makes degenerate-mode
/// runs bit-for-bit comparable to plain runs.
pub fn seeded_stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stream tags used across the crate; fixed so runs stay reproducible.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const CENTERS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const DATA: u64 = 5;
}

/// Hex-encoded SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
