//! Deterministic bag-of-tokens encoder used where no frozen encoder is available.

use crate::error::{Error, Result};
use crate::numeric::l2_normalize;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|t| !t.is_empty())
}

/// Hashes each whitespace token to a signed bucket and L2-normalizes the sum.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 8 {
        return Err(Error::Shape(format!("hash_embed needs dim >= 8, got {dim}")));
    }
    let mut v = vec![0.0f64; dim];
    for tok in tokenize(text) {
        let h = mix(fnv1a64(tok.as_bytes()) ^ mix(seed));
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    l2_normalize(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{cosine, norm};

    #[test]
    fn deterministic_and_unit() {
        let a = hash_embed("check the stock price", 64, 1).unwrap();
        assert_eq!(a, hash_embed("check the stock price", 64, 1).unwrap());
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert_ne!(a, hash_embed("check the stock price", 64, 2).unwrap());
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        let dim = 64;
        let sp = hash_embed("stock price", dim, 0).unwrap();
        let sps = hash_embed("stock prices", dim, 0).unwrap();
        let w = hash_embed("weather", dim, 0).unwrap();
        // one shared token of two on each side: cosine 1/2 barring collisions
        assert!(cosine(&sp, &sps) > cosine(&sp, &w));
        assert!((cosine(&sp, &sps) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_text_has_no_direction() {
        assert!(matches!(hash_embed("", 16, 0), Err(Error::ZeroNorm)));
        assert!(matches!(hash_embed("  ,. ", 16, 0), Err(Error::ZeroNorm)));
        assert!(hash_embed("x", 4, 0).is_err());
    }
}
