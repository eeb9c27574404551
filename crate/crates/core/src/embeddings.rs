//! Unit-norm embedding vectors and the embedding-provider abstraction.
//!
//! Similarity everywhere in the crate is the dot product of unit vectors.
//! Two providers ship by default: `offline-hash`, a deterministic character
//! trigram hasher used for tests and offline runs, and `http`, a thin client
//! for a JSON embedding endpoint.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

/// Tolerance used for unit-norm checks.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `raw` to unit length.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Self(raw.iter().map(|x| x / norm).collect()))
    }

    /// The `index`-th standard basis vector of length `dim`.
    pub fn basis(dim: usize, index: usize) -> Self {
        assert!(index < dim, "basis index {index} out of range for dim {dim}");
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Self(v)
    }

    /// Wraps values already known to be unit-norm (e.g. read back from disk).
    pub(crate) fn from_unit(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two unit vectors (their dot product).
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    Ok(dot(u.as_slice(), v.as_slice()))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Deterministic feature-hashed embedding of character trigrams.
///
/// Text is lowercased and whitespace-collapsed, padded with a boundary space
/// on each side, and every character trigram is hashed (FNV-1a) into one of
/// `dim` signed buckets. Blank text maps to the first basis vector.
pub fn hash_embed(text: &str, dim: usize) -> Result<EmbeddingVector> {
    if dim < 8 {
        return Err(Error::Config(format!("hash embedding dim must be >= 8, got {dim}")));
    }
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return Ok(EmbeddingVector::basis(dim, 0));
    }
    let padded: Vec<char> = format!(" {} ", words.join(" ")).chars().collect();
    let mut raw = vec![0.0f64; dim];
    let mut buf = [0u8; 12];
    for gram in padded.windows(3) {
        let mut len = 0;
        for ch in gram {
            len += ch.encode_utf8(&mut buf[len..]).len();
        }
        let h = fnv1a(&buf[..len]);
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        raw[bucket] += sign;
    }
    match EmbeddingVector::normalize(&raw) {
        Ok(v) => Ok(v),
        Err(_) => {
            log::warn!("trigram features cancelled out; using reserved basis vector");
            Ok(EmbeddingVector::basis(dim, 0))
        }
    }
}

/// Maps text to unit-norm embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// Identifies the model and settings; stored in indexes so queries are
    /// embedded in the same space as the chunks.
    fn fingerprint(&self) -> String;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    /// Providers that cannot take concurrent calls return `true`; [`Embedder`]
    /// serializes access to them.
    fn single_flight(&self) -> bool {
        false
    }
}

/// Shared handle over a provider that honours `single_flight`.
#[derive(Clone)]
pub struct Embedder {
    inner: Arc<dyn EmbeddingProvider>,
    gate: Option<Arc<Mutex<()>>>,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        let gate = provider.single_flight().then(|| Arc::new(Mutex::new(())));
        Self { inner: provider, gate }
    }

    pub fn offline(dim: usize) -> Result<Self> {
        Ok(Self::new(Arc::new(HashEmbedder::new(dim)?)))
    }

    pub fn from_config(config: &EmbedderConfig) -> Result<Self> {
        let provider = default_registry().create(&config.kind, config)?;
        Ok(Self::new(Arc::from(provider)))
    }

    pub fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let _guard = self.gate.as_ref().map(|g| g.lock().unwrap_or_else(|e| e.into_inner()));
        let out = self.inner.embed_batch(texts)?;
        if out.len() != texts.len() {
            return Err(Error::provider(
                self.inner.name(),
                format!("returned {} vectors for {} texts", out.len(), texts.len()),
                false,
            ));
        }
        Ok(out)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// The deterministic offline embedder.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Config(format!("hash embedding dim must be >= 8, got {dim}")));
        }
        Ok(Self { dim })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn name(&self) -> &str {
        "offline-hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("offline-hash/trigram-fnv1a/v1/dim={}", self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        texts.iter().map(|t| hash_embed(t, self.dim)).collect()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an endpoint speaking `{"texts": [...]}` -> `{"vectors": [[...], ...]}`.
pub struct HttpEmbedder {
    endpoint: String,
    token: Option<String>,
    dim: usize,
    batch_size: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(config: &EmbedderConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config("http embedder needs an endpoint".into()))?;
        let token = read_token(config.token_env.as_deref())?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        Ok(Self {
            endpoint,
            token,
            dim: config.dim,
            batch_size: config.batch_size.max(1),
            agent,
        })
    }

    fn post(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let resp: EmbedResponse = req
            .send_json(EmbedRequest { texts })
            .map_err(|e| http_error("http-embedder", e))?
            .into_json()
            .map_err(|e| Error::provider("http-embedder", format!("bad response body: {e}"), false))?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::provider(
                "http-embedder",
                format!("expected {} vectors, got {}", texts.len(), resp.vectors.len()),
                false,
            ));
        }
        resp.vectors
            .iter()
            .map(|raw| {
                if raw.len() != self.dim {
                    return Err(Error::DimMismatch {
                        left: self.dim,
                        right: raw.len(),
                    });
                }
                EmbeddingVector::normalize(raw)
            })
            .collect()
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn name(&self) -> &str {
        "http"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("http/{}/dim={}", self.endpoint, self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            out.extend(self.post(batch)?);
        }
        Ok(out)
    }
}

pub(crate) fn read_token(env_name: Option<&str>) -> Result<Option<String>> {
    match env_name {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| Error::Config(format!("environment variable {name} is not set"))),
    }
}

pub(crate) fn http_error(provider: &str, err: ureq::Error) -> Error {
    match err {
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            let retryable = code == 429 || code >= 500;
            Error::provider(provider, format!("HTTP {code}: {body}"), retryable)
        }
        ureq::Error::Transport(t) => {
            let msg = t.to_string();
            if msg.contains("timed out") || msg.contains("Timeout") {
                Error::Timeout(provider.to_string())
            } else {
                Error::provider(provider, msg, true)
            }
        }
    }
}

fn default_dim() -> usize {
    256
}

fn default_batch() -> usize {
    32
}

fn default_timeout() -> u64 {
    30
}

/// The `embedder` section of a provider configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    /// `offline-hash` or `http`.
    pub kind: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: "offline-hash".into(),
            endpoint: None,
            token_env: None,
            dim: default_dim(),
            batch_size: default_batch(),
            timeout_secs: default_timeout(),
        }
    }
}

pub fn default_registry() -> Registry<dyn EmbeddingProvider, EmbedderConfig> {
    let mut reg: Registry<dyn EmbeddingProvider, EmbedderConfig> = Registry::new("embedder");
    reg.register("offline-hash", |c: &EmbedderConfig| Ok(Box::new(HashEmbedder::new(c.dim)?)));
    reg.register("http", |c: &EmbedderConfig| Ok(Box::new(HttpEmbedder::new(c)?)));
    reg
}
