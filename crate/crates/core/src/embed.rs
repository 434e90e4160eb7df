//! Token-level embedders.
//!
//! An embedder splits text into tokens and maps every token to a unit vector
//! of a fixed dimension. [`HashEmbedder`] is fully offline and deterministic;
//! [`RemoteEmbedder`] calls an HTTP service.

use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;
pub const PAD_TOKEN: &str = "[PAD]";

/// Per-token unit vectors for one piece of text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddings {
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl TokenEmbeddings {
    pub fn new(tokens: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.len() != vectors.len() {
            return Err(Error::Embedder(format!(
                "{} tokens but {} vectors",
                tokens.len(),
                vectors.len()
            )));
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: bad.len(),
                });
            }
        }
        Ok(TokenEmbeddings { tokens, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

/// Persisted description of an embedder, enough to rebuild it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Hash { seed: u64, dim: usize },
    Remote { url: String, dim: usize },
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn spec(&self) -> EmbedderSpec;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<TokenEmbeddings>>;

    fn embed(&self, text: &str) -> Result<TokenEmbeddings> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::Embedder("embedder returned no output".into()))
    }
}

/// Lowercase, split on non-alphanumerics, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Embedder("cannot normalize a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// Offline embedder: every token gets a Gaussian vector drawn from a ChaCha
/// stream seeded by SHA-256(seed, token), then L2-normalized.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    seed: u64,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { seed, dim }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);

        let mut v = Vec::with_capacity(self.dim);
        while v.len() < self.dim {
            // Box-Muller on two open-interval uniforms.
            let u1 = unit_open(rng.next_u64());
            let u2 = unit_open(rng.next_u64());
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = std::f64::consts::TAU * u2;
            v.push(r * theta.cos());
            if v.len() < self.dim {
                v.push(r * theta.sin());
            }
        }
        normalize(&mut v).expect("gaussian draw is non-zero");
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(0, DEFAULT_DIM)
    }
}

fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec::Hash {
            seed: self.seed,
            dim: self.dim,
        }
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<TokenEmbeddings>> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut tokens = tokenize(text);
                if tokens.is_empty() {
                    tokens.push(PAD_TOKEN.to_string());
                }
                let vectors = tokens.iter().map(|t| self.token_vector(t)).collect();
                TokenEmbeddings { tokens, vectors }
            })
            .collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<Vec<f64>>>,
}

/// Client for `POST {base}/embed` returning per-token vectors.
pub struct RemoteEmbedder {
    url: String,
    dim: usize,
    max_retries: u32,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration, max_retries: u32) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Embedder(e.to_string()))?;
        Ok(RemoteEmbedder {
            url: url.into(),
            dim,
            max_retries,
            client,
        })
    }

    fn endpoint(&self) -> String {
        format!("{}/embed", self.url.trim_end_matches('/'))
    }

    fn call(&self, texts: &[&str]) -> Result<EmbedResponse> {
        let mut attempt = 0;
        loop {
            let result = self
                .client
                .post(self.endpoint())
                .json(&EmbedRequest { texts })
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json::<EmbedResponse>());
            match result {
                Ok(resp) => return Ok(resp),
                Err(e) if e.is_decode() => {
                    return Err(Error::Embedder(format!("malformed embed response: {e}")))
                }
                Err(e) if attempt < self.max_retries => {
                    attempt += 1;
                    tracing::warn!(attempt, error = %e, "embedder request failed, retrying");
                    std::thread::sleep(Duration::from_millis(100 << attempt));
                }
                Err(e) => return Err(Error::Embedder(format!("transport failure: {e}"))),
            }
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn spec(&self) -> EmbedderSpec {
        EmbedderSpec::Remote {
            url: self.url.clone(),
            dim: self.dim,
        }
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<TokenEmbeddings>> {
        let resp = self.call(texts)?;
        if resp.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: resp.dim,
            });
        }
        if resp.embeddings.len() != texts.len() {
            return Err(Error::Embedder(format!(
                "malformed embed response: {} texts but {} embeddings",
                texts.len(),
                resp.embeddings.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .map(|mut vectors| {
                if vectors.is_empty() {
                    return Err(Error::Embedder("malformed embed response: no tokens".into()));
                }
                for v in &mut vectors {
                    if v.len() != self.dim {
                        return Err(Error::DimensionMismatch {
                            expected: self.dim,
                            actual: v.len(),
                        });
                    }
                    normalize(v)?;
                }
                let tokens = (0..vectors.len()).map(|i| format!("[t{i}]")).collect();
                TokenEmbeddings::new(tokens, vectors)
            })
            .collect()
    }
}

pub fn from_spec(spec: &EmbedderSpec, timeout: Duration, max_retries: u32) -> Result<Box<dyn Embedder>> {
    Ok(match spec {
        EmbedderSpec::Hash { seed, dim } => Box::new(HashEmbedder::new(*seed, *dim)),
        EmbedderSpec::Remote { url, dim } => {
            Box::new(RemoteEmbedder::new(url.clone(), *dim, timeout, max_retries)?)
        }
    })
}
