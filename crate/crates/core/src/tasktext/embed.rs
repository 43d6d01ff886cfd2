use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::vocab::tokenize;
use crate::seed::{fnv1a, rng_for};

/// Deterministic text encoder: hashed bag of words through a fixed random
/// projection, then L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedder {
    dim: usize,
    hash_buckets: usize,
    projection: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub hash_buckets: usize,
    pub seed: u64,
}

impl TextEmbedder {
    pub fn new(cfg: EmbedderConfig) -> Self {
        let mut rng = rng_for(cfg.seed, "text-embedder");
        let projection = (0..cfg.hash_buckets * cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        Self { dim: cfg.dim, hash_buckets: cfg.hash_buckets, projection }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let words = tokenize(text);
        if words.is_empty() {
            log::warn!("embedding empty text as the zero vector");
            return out;
        }
        for w in &words {
            let b = (fnv1a(w.as_bytes()) % self.hash_buckets as u64) as usize;
            for (o, p) in out.iter_mut().zip(&self.projection[b * self.dim..(b + 1) * self.dim]) {
                *o += p;
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        out
    }
}
