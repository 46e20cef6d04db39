//! Deterministic chunk embedder: seeded hashed bag-of-n-grams (n = 1..3)
//! projected to `dim` dimensions and L2-normalized.
//!
//! Near-duplicate token spans share most n-grams and therefore land close in
//! cosine distance, which is the property the retrieval pipeline relies on.

use crate::corpus::vocab::PAD;

pub const DEFAULT_DIM: usize = 128;

#[inline]
fn fnv1a(seed: u64, parts: &[u32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &p in parts {
        for b in p.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Embeds a token chunk into a unit-norm `dim`-vector.
///
/// PAD tokens are stripped first, so a tail chunk embeds the same as its
/// unpadded content. An all-PAD chunk maps to the first basis vector.
pub fn embed_chunk(tokens: &[u32], dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim >= 1);
    let mut v = vec![0.0f32; dim];
    let content: Vec<u32> = tokens.iter().copied().filter(|&t| t != PAD).collect();
    for n in 1..=3usize {
        if content.len() < n {
            break;
        }
        let tag = n as u32;
        for gram in content.windows(n) {
            let mut parts = Vec::with_capacity(n + 1);
            parts.push(tag);
            parts.extend_from_slice(gram);
            let h = fnv1a(seed, &parts);
            let slot = (h % dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[slot] += sign;
        }
    }
    let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    crate::numerics::dot(a, b)
}
