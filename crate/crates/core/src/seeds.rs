//! Deterministic seed derivation.
//!
//! Every stochastic stream in a campaign (weight init, prefix draws,
//! generation sampling, probe construction, ...) gets its own seed derived
//! from a master seed plus a stream tag, so reordering one consumer never
//! perturbs another.

/// SplitMix64 finalizer; good avalanche, stable across platforms.
#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a over arbitrary bytes. Used instead of the std hasher so derived
/// seeds do not depend on the Rust release.
#[inline]
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from `(master, tag, index)`.
pub fn derive(master: u64, tag: &str, index: u64) -> u64 {
    splitmix64(master ^ fnv1a(tag.as_bytes()) ^ splitmix64(index))
}

/// Hash a token sequence to a stable u64 (content-addressed streams).
pub fn token_hash(tokens: &[u32]) -> u64 {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fnv1a(&bytes)
}
