//! Embedding vectors and the embedding gateway.
//!
//! All similarity decisions in the graph layer (observation merging,
//! knowledge-node dedup, exemplar retrieval) run on L2-normalized vectors so
//! cosine reduces to a dot product. The trait is deliberately tiny; the
//! shipped [`MockEmbedder`] hashes character n-grams into a fixed number of
//! signed buckets, which makes vectors a pure function of (seed, text) —
//! byte-reproducible across runs and platforms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_match;
use crate::util::stable_u64;

/// Default embedding dimension used by stores and the mock embedder.
pub const DEFAULT_EMBED_DIM: usize = 256;

/// Tolerance on the L2 norm of a unit vector.
pub const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot normalize a zero-length or zero-norm vector")]
    ZeroVector,
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("embedding backend failure: {0}")]
    Backend(String),
}

/// An L2-normalized vector. Construction guarantees ‖v‖₂ = 1 ± 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitVec(Vec<f64>);

impl UnitVec {
    /// Normalizes `raw` to unit length. Errors on empty or zero-norm input.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self, EmbedError> {
        if raw.is_empty() {
            return Err(EmbedError::ZeroVector);
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::ZeroVector);
        }
        Ok(UnitVec(raw.into_iter().map(|x| x / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// L2 norm; 1 ± 1e-9 by construction, exposed for validators.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Cosine similarity between two unit vectors (a plain dot product).
pub fn cosine(a: &UnitVec, b: &UnitVec) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .sum())
}

/// Embedding gateway: text in, unit vector of a fixed dimension out.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds `text`. Implementations must be deterministic for a fixed
    /// configuration and must reject text that normalizes to nothing.
    fn embed(&self, text: &str) -> Result<UnitVec, EmbedError>;
}

/// Seeded hashing embedder.
///
/// Pipeline: aggressive text normalization → optional synonym
/// canonicalization (exact match on the normal form) → character trigrams →
/// each trigram hashed (together with the seed) into a signed bucket →
/// accumulate → L2 normalize.
///
/// Consequences the rest of the system relies on:
/// - texts equal after case/punctuation normalization embed identically
///   (cosine exactly 1);
/// - fixture synonyms (e.g. "dyspnea" ↔ "shortness of breath") embed
///   identically;
/// - unrelated texts land near-orthogonal with overwhelming probability.
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    synonyms: BTreeMap<String, String>,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockEmbedder {
            dim,
            seed,
            synonyms: BTreeMap::new(),
        }
    }

    /// Installs a synonym table. Keys and values are stored in the aggressive
    /// normal form; lookups replace the whole text on exact match.
    pub fn with_synonyms<I, S>(mut self, pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        for (from, to) in pairs {
            self.synonyms.insert(
                normalize_match(from.as_ref()),
                normalize_match(to.as_ref()),
            );
        }
        self
    }

    fn canonical(&self, text: &str) -> String {
        let normal = normalize_match(text);
        match self.synonyms.get(&normal) {
            Some(canon) => canon.clone(),
            None => normal,
        }
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<UnitVec, EmbedError> {
        let canon = self.canonical(text);
        if canon.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let padded: Vec<char> = format!("^{canon}$").chars().collect();
        let mut acc = vec![0.0f64; self.dim];
        let window = 3.min(padded.len());
        for gram in padded.windows(window) {
            let gram: String = gram.iter().collect();
            let h = stable_u64(&format!("{}\u{1f}{}", self.seed, gram));
            let bucket = ((h >> 1) % self.dim as u64) as usize;
            let sign = if h & 1 == 1 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        if acc.iter().all(|x| *x == 0.0) {
            // Pathological full cancellation: fall back to a single
            // deterministic bucket so the vector stays well-defined.
            let bucket = (stable_u64(&canon) % self.dim as u64) as usize;
            acc[bucket] = 1.0;
        }
        UnitVec::from_raw(acc)
    }
}
