//! Text-embedding backends.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::client::{Transport, TransportError};
use crate::error::{Error, Result};
use crate::rng;

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;
}

/// A validated semantic vector for one user or item.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    pub owner_id: u32,
    pub vector: Vec<f32>,
    pub norm: f64,
}

impl SemanticEmbedding {
    pub fn new(owner_id: u32, vector: Vec<f32>) -> Result<Self> {
        if let Some(pos) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding {
                id: owner_id,
                reason: format!("non-finite entry at {pos}"),
            });
        }
        let norm = vector.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidEmbedding {
                id: owner_id,
                reason: "zero vector".into(),
            });
        }
        Ok(Self {
            owner_id,
            vector,
            norm,
        })
    }
}

pub fn embed_text(owner_id: u32, text: &str, backend: &dyn TextEmbedder) -> Result<SemanticEmbedding> {
    let v = backend.embed(text)?;
    if v.len() != backend.dim() {
        return Err(Error::DimensionMismatch {
            expected: backend.dim(),
            actual: v.len(),
        });
    }
    SemanticEmbedding::new(owner_id, v)
}

/// Offline embedder: a bag-of-tokens random projection. Each distinct
/// lower-cased alphanumeric token owns a seeded Gaussian direction; the text
/// vector is the count-weighted sum, normalized. Texts whose token counts
/// are proportional map to the same vector; texts sharing tokens correlate.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

pub const DEFAULT_STUB_DIM: usize = 64;

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim, seed }
    }

    fn token_hash(token: &str) -> u64 {
        let digest = Sha256::digest(token.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn direction(&self, token: &str, out: &mut [f64], weight: f64) {
        let mut r = rng::stream(self.seed, &[rng::purpose::HASH_EMBED, Self::token_hash(token)]);
        for o in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *o += weight * z;
        }
    }
}

pub fn tokenize(text: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for tok in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
    }
    counts
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let counts = tokenize(text);
        let mut acc = vec![0.0f64; self.dim];
        if counts.is_empty() {
            self.direction("\u{0}empty", &mut acc, 1.0);
        }
        for (tok, c) in &counts {
            self.direction(tok, &mut acc, *c as f64);
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(acc.iter().map(|v| (v / norm) as f32).collect())
    }
}

/// Adapter for an external embedding service speaking the common
/// `{"model", "input"} -> {"data": [{"embedding": [...]}]}` protocol.
pub struct HttpEmbedder {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub transport: Box<dyn Transport>,
}

impl HttpEmbedder {
    /// Reads `SEQREC_EMBED_ENDPOINT`, `SEQREC_EMBED_MODEL`, `SEQREC_EMBED_API_KEY`.
    pub fn from_env(dim: usize, transport: Box<dyn Transport>) -> Result<Self> {
        let endpoint = std::env::var("SEQREC_EMBED_ENDPOINT")
            .map_err(|_| Error::Config("SEQREC_EMBED_ENDPOINT is not set".into()))?;
        Ok(Self {
            endpoint,
            model: std::env::var("SEQREC_EMBED_MODEL").unwrap_or_else(|_| "sup-simcse-roberta-large".into()),
            api_key: std::env::var("SEQREC_EMBED_API_KEY").ok(),
            dim,
            transport,
        })
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let body = json!({"model": self.model, "input": text});
        let resp = self
            .transport
            .post_json(&self.endpoint, &body, self.api_key.as_deref())
            .map_err(|e| match e {
                TransportError::Transient(m) | TransportError::Fatal(m) => Error::Remote {
                    attempts: 1,
                    message: m,
                },
            })?;
        let arr = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse("embedding response without data[0].embedding".into()))?;
        let v: Vec<f32> = arr.iter().map(|x| x.as_f64().unwrap_or(f64::NAN) as f32).collect();
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(v)
    }
}
