//! Text embedding backends for similarity-scored answers.
//!
//! Two interchangeable implementations sit behind [`Embedder`]: a remote
//! embedding endpoint for production scoring, and a deterministic
//! normalized bag-of-tokens vectorizer for offline tests. Exact-model
//! parity with any particular embedding service is a non-goal; the
//! interface and the cosine contract are what downstream scoring relies on.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::client::{ChatClient, ClientError};

/// Either a dense service vector or a sparse token-count vector. Both sides
/// of a comparison must come from the same backend.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Dense(Vec<f64>),
    Sparse(BTreeMap<String, f64>),
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("embeddings from different backends cannot be compared")]
    MixedVariants,
    #[error("embedding backend returned dense vectors of different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

/// Cosine similarity in [-1, 1]. A zero vector on either side yields 0.0;
/// callers decide whether to clamp further.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    match (a, b) {
        (Embedding::Dense(x), Embedding::Dense(y)) => {
            if x.len() != y.len() {
                return Err(EmbedError::LengthMismatch(x.len(), y.len()));
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let na: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) })
        }
        (Embedding::Sparse(x), Embedding::Sparse(y)) => {
            let dot: f64 = x
                .iter()
                .filter_map(|(tok, v)| y.get(tok).map(|w| v * w))
                .sum();
            let na: f64 = x.values().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = y.values().map(|v| v * v).sum::<f64>().sqrt();
            Ok(if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) })
        }
        _ => Err(EmbedError::MixedVariants),
    }
}

// ---------------------------------------------------------------------------
// Deterministic offline backend
// ---------------------------------------------------------------------------

/// Lowercased token counts, L2-normalized. Texts with no shared tokens score
/// exactly 0.0, identical texts exactly 1.0 — the properties the offline
/// test suite leans on.
#[derive(Debug, Clone, Copy, Default)]
pub struct BagOfTokensEmbedder;

impl BagOfTokensEmbedder {
    fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
    }
}

impl Embedder for BagOfTokensEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for tok in Self::tokens(text) {
            *counts.entry(tok).or_insert(0.0) += 1.0;
        }
        let norm: f64 = counts.values().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in counts.values_mut() {
                *v /= norm;
            }
        }
        Ok(Embedding::Sparse(counts))
    }
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

/// Embeddings fetched from a service endpoint, sharing the chat client's
/// transport (retry, backoff, auth, in-flight cap).
pub struct RemoteEmbedder {
    client: ChatClient,
}

impl RemoteEmbedder {
    pub fn new(client: ChatClient) -> Self {
        RemoteEmbedder { client }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let vector = self.client.embed(text).map_err(|e| match e {
            ClientError::AuthRejected => {
                EmbedError::BackendUnavailable("authentication rejected".into())
            }
            other => EmbedError::BackendUnavailable(other.to_string()),
        })?;
        Ok(Embedding::Dense(vector))
    }
}
