//! Persona text embeddings behind a provider contract.
//!
//! The hash backend is a signed feature-hashing vectorizer: every token is
//! hashed with xxh3 under a fixed seed, the low bits pick the bucket and the
//! top bit picks the sign, and the result is L2-normalized. Output depends
//! only on the text, the dimension and [`HASH_SEED`], so vectors are
//! bit-identical across processes and platforms.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::ProviderError;
use crate::similarity::tokenize;
use crate::transport::{api_key, HttpTransport, JsonTransport, Limiter, RetryPolicy};

pub const HASH_SEED: u64 = 0x5550_4353_4841_5348;
pub const EMBED_API_KEY_VAR: &str = "UPCS_EMBED_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    degenerate: bool,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ProviderError> {
        if values.len() < 2 {
            return Err(ProviderError::Validation(format!(
                "embedding dimension {} < 2",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::Validation(
                "embedding has non-finite values".into(),
            ));
        }
        let degenerate = values.iter().all(|v| *v == 0.0);
        Ok(EmbeddingVector { values, degenerate })
    }

    pub fn zero(dimension: usize) -> Self {
        EmbeddingVector {
            values: vec![0.0; dimension],
            degenerate: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// Zero vector (empty text, or a text with no tokens).
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Result<Self, ProviderError> {
        if dimension < 2 {
            return Err(ProviderError::Validation(format!(
                "dimension {dimension} < 2"
            )));
        }
        Ok(HashEmbedder { dimension })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let mut values = vec![0.0; self.dimension];
        for token in tokenize(text) {
            let h = xxh3_64_with_seed(token.as_bytes(), HASH_SEED);
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            values[bucket] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(EmbeddingVector::zero(self.dimension));
        }
        for v in &mut values {
            *v /= norm;
        }
        EmbeddingVector::new(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingBackend {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingProviderConfig {
    pub backend: EmbeddingBackend,
    pub dimension: usize,
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig {
            backend: EmbeddingBackend::Hash,
            dimension: 256,
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: 30,
            max_in_flight: 4,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, ProviderError> {
        match self.backend {
            EmbeddingBackend::Hash => Ok(Arc::new(HashEmbedder::new(self.dimension)?)),
            EmbeddingBackend::Remote => {
                let transport = HttpTransport::new(Duration::from_secs(self.timeout_secs))?;
                Ok(Arc::new(RemoteEmbedder::new(
                    Arc::new(transport),
                    self.endpoint.clone(),
                    self.model.clone(),
                    self.dimension,
                    Some(api_key(EMBED_API_KEY_VAR)?),
                    self.max_in_flight,
                )))
            }
        }
    }
}

/// Client for an embedding service speaking
/// `{"model","input":[texts]}` → `{"data":[{"embedding":[...]}]}`.
pub struct RemoteEmbedder {
    transport: Arc<dyn JsonTransport>,
    endpoint: String,
    model: String,
    dimension: usize,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl RemoteEmbedder {
    pub fn new(
        transport: Arc<dyn JsonTransport>,
        endpoint: String,
        model: String,
        dimension: usize,
        api_key: Option<String>,
        max_in_flight: usize,
    ) -> Self {
        RemoteEmbedder {
            transport,
            endpoint,
            model,
            dimension,
            api_key,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(max_in_flight),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn request(&self, inputs: &[&str]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let body = json!({ "model": self.model, "input": inputs });
        let response = {
            let _permit = self.limiter.acquire();
            self.retry.run(|| {
                self.transport
                    .post_json(&self.endpoint, self.api_key.as_deref(), &body)
            })?
        };
        parse_embedding_response(&response, inputs.len(), self.dimension)
    }
}

fn parse_embedding_response(
    response: &Value,
    expected: usize,
    dimension: usize,
) -> Result<Vec<EmbeddingVector>, ProviderError> {
    let data = response
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::Validation("response missing data array".into()))?;
    if data.len() != expected {
        return Err(ProviderError::Validation(format!(
            "expected {expected} embeddings, got {}",
            data.len()
        )));
    }
    data.iter()
        .map(|item| {
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| ProviderError::Validation("item missing embedding".into()))?
                .iter()
                .map(|v| {
                    v.as_f64().ok_or_else(|| {
                        ProviderError::Validation("non-numeric embedding value".into())
                    })
                })
                .collect::<Result<_, _>>()?;
            if values.len() != dimension {
                return Err(ProviderError::Validation(format!(
                    "embedding dimension {} != configured {dimension}",
                    values.len()
                )));
            }
            EmbeddingVector::new(values)
        })
        .collect()
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        Ok(self.embed_batch(&[text.to_string()])?.remove(0))
    }

    /// One request for all non-empty texts; any failure fails the whole batch.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        let pending: Vec<&str> = texts
            .iter()
            .filter(|t| !t.trim().is_empty())
            .map(String::as_str)
            .collect();
        let mut fetched = if pending.is_empty() {
            Vec::new()
        } else {
            self.request(&pending)?
        }
        .into_iter();
        Ok(texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    EmbeddingVector::zero(self.dimension)
                } else {
                    fetched.next().expect("one embedding per non-empty text")
                }
            })
            .collect())
    }
}
