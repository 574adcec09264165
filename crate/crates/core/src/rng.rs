//! Keyed random streams.
//!
//! Every stochastic update draws from a stream derived from the run seed and
//! a path of integer keys (sweep, conditional, pixel, ...). Results therefore
//! do not depend on the order in which work items execute, which keeps runs
//! bit-identical at any thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit key from a seed and a key path.
pub fn derive_key(seed: u64, keys: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// Independent stream for `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let k = derive_key(seed, keys);
    let mut bytes = [0u8; 32];
    let mut state = k;
    for chunk in bytes.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stable 64-bit FNV-1a hash of a label, used to key per-subject streams.
pub fn label_key(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
