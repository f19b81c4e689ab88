//! Deterministic RNG streams.
//!
//! Every stochastic choice in the crate (weight init, shuffles, dropout
//! masks, UNK embedding row) draws from a ChaCha stream derived from the run
//! seed and a label, so independent consumers never share a stream and the
//! same seed reproduces the same run bit for bit on any platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a sub-seed: the first draw of the labeled stream. Used where a
/// nested run (a split, a tri-training session) needs its own seed.
pub fn derive(seed: u64, label: &str) -> u64 {
    use rand::Rng;
    stream(seed, label).random()
}

/// Derive an independent RNG stream from `seed` and a label.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    // FNV-1a over the label fills the rest of the key.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    key[8..16].copy_from_slice(&h.to_le_bytes());
    key[16..24].copy_from_slice(&h.rotate_left(31).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
