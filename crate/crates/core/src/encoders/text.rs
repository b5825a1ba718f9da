use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Maps category text to a fixed vector. Equal text gives equal vectors
/// and empty text gives the zero vector.
pub trait CategoryTextProvider {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Hashed bag of words: every lower-cased alphanumeric token contributes a
/// pseudo-random Gaussian direction seeded by its SHA-256 digest; the sum is
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedBagOfWords {
    dim: usize,
}

impl HashedBagOfWords {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let seed: [u8; 32] = digest.into();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        (0..self.dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    }
}

impl CategoryTextProvider for HashedBagOfWords {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            for (a, v) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|x| *x /= norm);
        }
        acc
    }
}

/// Vectors computed offline by an external sentence encoder, loaded from a
/// JSON object `{ "<text>": [f64, ...], ... }`. Unknown text maps to zero.
#[derive(Debug, Clone)]
pub struct PrecomputedText {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedText {
    pub fn new(table: HashMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table.values().next().map_or(0, Vec::len);
        if table.values().any(|v| v.len() != dim) {
            return Err(Error::InvalidArgument("text vectors have inconsistent widths".into()));
        }
        Ok(Self { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::new(serde_json::from_slice(&bytes)?)
    }
}

impl CategoryTextProvider for PrecomputedText {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        if text.is_empty() {
            return vec![0.0; self.dim];
        }
        self.table.get(text).cloned().unwrap_or_else(|| {
            log::warn!("no precomputed vector for category {text:?}");
            vec![0.0; self.dim]
        })
    }
}
