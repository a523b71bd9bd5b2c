//! Text embeddings: a deterministic feature-hashing provider for tests and
//! offline use, and a remote provider speaking the common embeddings-API
//! shape. All providers emit unit-norm vectors.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{token_from_env, HttpFailure, JsonPoster, RetryPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vector must be non-empty with finite values")]
    InvalidVector,
    #[error("embedding authentication failed: {0}")]
    Auth(String),
    #[error("embedding backend rate limited after retries: {0}")]
    RateLimited(String),
    #[error("embedding transport failure: {0}")]
    Transport(String),
    #[error("embedding backend returned an unexpected response: {0}")]
    Protocol(String),
    #[error("invalid embedding configuration: {0}")]
    Config(String),
}

impl From<HttpFailure> for EmbedError {
    fn from(f: HttpFailure) -> Self {
        match f {
            HttpFailure::Auth { .. } => EmbedError::Auth(f.to_string()),
            HttpFailure::RateLimited { .. } => EmbedError::RateLimited(f.to_string()),
            HttpFailure::Status { .. } => EmbedError::Protocol(f.to_string()),
            HttpFailure::Transport(msg) => EmbedError::Transport(msg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidVector);
        }
        Ok(Self { values })
    }

    /// Scales `values` to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbedError> {
        let mut v = Self::new(values)?;
        let norm = v.norm();
        if norm == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        v.values.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// One vector per input, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop()
            .ok_or_else(|| EmbedError::Protocol("provider returned no vector".into()))
    }
}

pub const MIN_HASH_DIM: usize = 8;
pub const DEFAULT_HASH_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lower-cased alphanumeric runs.
pub fn hash_terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Feature-hashed bag-of-words embedding: each term adds its frequency to
/// bucket `h mod dim` with a sign taken from the top hash bit. Text without
/// terms maps to the first basis vector.
pub fn hash_embed(text: &str, dim: usize) -> EmbeddingVector {
    assert!(dim >= MIN_HASH_DIM, "hash_embed requires dim >= {MIN_HASH_DIM}");
    let mut values = vec![0.0f64; dim];
    for term in hash_terms(text) {
        let h = fnv1a(term.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[bucket] += sign;
    }
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        values[0] = 1.0;
    } else {
        values.iter_mut().for_each(|x| *x /= norm);
    }
    EmbeddingVector { values }
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub const NAME: &'static str = "hash";

    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim < MIN_HASH_DIM {
            return Err(EmbedError::Config(format!("hash dimension must be at least {MIN_HASH_DIM}")));
        }
        Ok(Self { dim })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_HASH_DIM }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| hash_embed(t, self.dim)).collect())
    }
}

pub const EMBED_API_KEY_VAR: &str = "EMBED_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEmbedConfig {
    pub url: String,
    pub model: String,
    pub dim: usize,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    /// Bearer token. `from_env` fills it from `EMBED_API_KEY`.
    pub api_key: Option<String>,
}

impl RemoteEmbedConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            dim,
            batch_size: 100,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(60),
            api_key: None,
        }
    }

    pub fn from_env(mut self) -> Self {
        self.api_key = token_from_env(EMBED_API_KEY_VAR);
        self
    }
}

pub struct RemoteEmbedder {
    config: RemoteEmbedConfig,
    poster: JsonPoster,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteEmbedConfig) -> Result<Self, EmbedError> {
        if config.batch_size == 0 || config.dim == 0 {
            return Err(EmbedError::Config("batch size and dimension must be positive".into()));
        }
        let poster = JsonPoster::new(config.timeout, config.retry, config.max_in_flight);
        Ok(Self { config, poster })
    }

    fn embed_chunk(&self, chunk: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let body = json!({ "input": chunk, "model": self.config.model });
        let response = self.poster.post(&self.config.url, self.config.api_key.as_deref(), &body)?;
        let data = response
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| EmbedError::Protocol("response has no data array".into()))?;
        if data.len() != chunk.len() {
            return Err(EmbedError::Protocol(format!(
                "expected {} embeddings, got {}",
                chunk.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|item| {
                let raw = item
                    .get("embedding")
                    .and_then(|e| e.as_array())
                    .ok_or_else(|| EmbedError::Protocol("item has no embedding array".into()))?;
                if raw.len() != self.config.dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.config.dim,
                        actual: raw.len(),
                    });
                }
                let values = raw
                    .iter()
                    .map(|v| v.as_f64().ok_or(EmbedError::InvalidVector))
                    .collect::<Result<Vec<_>, _>>()?;
                EmbeddingVector::normalized(values)
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.batch_size) {
            out.extend(self.embed_chunk(chunk)?);
        }
        Ok(out)
    }
}
