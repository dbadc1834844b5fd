//! Platform-independent 64-bit hashing used for splits, fingerprints and
//! canonical graph digests.

/// Fixed seed mixed into every structural hash.
pub const HASH_SEED: u64 = 0x5f1d_2c3b_9e37_79b9;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive combination of a sequence of words.
pub fn hash_words(words: impl IntoIterator<Item = u64>) -> u64 {
    words.into_iter().fold(mix64(HASH_SEED), |h, w| {
        mix64(h ^ mix64(w.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    })
}
