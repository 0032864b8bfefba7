//! Text embedders. The default is a deterministic feature-hashing embedder;
//! anything implementing [`Embedder`] can replace it.

use thiserror::Error;

use crate::text::tokenize;

pub const DEFAULT_DIMENSION: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmbedError {
    #[error("text has no tokens to embed")]
    EmptyText,
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    /// Returns an L2-normalized vector of length [`Embedder::dimension`].
    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Feature-hashed term frequencies. Each token lands in bucket
/// `fnv1a64(token) % dim`; the sign comes from the parity of `fnv1a64(token) / dim`.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    name: String,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, name: format!("hashing-{dimension}") }
    }

    pub fn bucket(&self, token: &str) -> (usize, f64) {
        let h = fnv1a64(token.as_bytes());
        let d = self.dimension as u64;
        let sign = if (h / d).is_multiple_of(2) { 1.0 } else { -1.0 };
        ((h % d) as usize, sign)
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut v = vec![0.0; self.dimension];
        for t in &tokens {
            let (i, sign) = self.bucket(t);
            v[i] += sign;
        }
        if v.iter().all(|&x| x == 0.0) {
            // Every token cancelled against another in its bucket; fall back
            // to unsigned counts, which cannot cancel.
            for t in &tokens {
                v[self.bucket(t).0] += 1.0;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}
