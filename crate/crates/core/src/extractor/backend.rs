use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Hidden state of the final token.
    #[default]
    LastToken,
    /// Mean of the hidden states of all tokens.
    MeanPool,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::LastToken => "last_token",
            Pooling::MeanPool => "mean_pool",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_token" => Ok(Pooling::LastToken),
            "mean_pool" => Ok(Pooling::MeanPool),
            other => Err(Error::invalid(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub dim: usize,
    pub pooling: Pooling,
    pub endpoint: Option<String>,
}

/// A frozen language model seen as a text → hidden-state function.
pub trait FeatureBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Final-layer hidden state of `text`, pooled per the descriptor.
    fn hidden_state(&self, text: &str) -> Result<Vec<f32>>;
}

fn unit_noise(digest: &[u8], dim: usize) -> Vec<f64> {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Simulates causal hidden states: the state at token `t` is a pseudo-random
/// vector determined by the seed and the text up to and including `t`.
fn causal_states(seed: u64, text: &str, dim: usize, pooling: Pooling) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.is_empty() {
        return unit_noise(&hasher.finalize(), dim);
    }
    let mut sum = vec![0.0; dim];
    let mut last = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        hasher.update(tok.as_bytes());
        hasher.update([0u8]);
        if pooling == Pooling::MeanPool || i + 1 == tokens.len() {
            let state = unit_noise(&hasher.clone().finalize(), dim);
            for (s, v) in sum.iter_mut().zip(&state) {
                *s += v;
            }
            last = state;
        }
    }
    match pooling {
        Pooling::LastToken => last,
        Pooling::MeanPool => sum.into_iter().map(|s| s / tokens.len() as f64).collect(),
    }
}

/// Deterministic stand-in for a language model: a pure function of
/// `(text, seed)` with no semantic structure.
#[derive(Debug, Clone)]
pub struct MockBackend {
    descriptor: BackendDescriptor,
    seed: u64,
}

impl MockBackend {
    pub fn new(dim: usize, pooling: Pooling, seed: u64) -> Self {
        MockBackend {
            descriptor: BackendDescriptor {
                backend_id: format!("mock-d{dim}-{pooling}-s{seed}"),
                dim,
                pooling,
                endpoint: None,
            },
            seed,
        }
    }
}

impl FeatureBackend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn hidden_state(&self, text: &str) -> Result<Vec<f32>> {
        Ok(causal_states(self.seed, text, self.descriptor.dim, self.descriptor.pooling)
            .into_iter()
            .map(|v| v as f32)
            .collect())
    }
}

/// Mock whose output is the one-hot direction of the prompt's category plus
/// `noise`-scaled hash noise, so same-category prompts land close together.
#[derive(Debug, Clone)]
pub struct StructuredMockBackend {
    descriptor: BackendDescriptor,
    seed: u64,
    noise: f64,
    vocab: Vec<String>,
}

impl StructuredMockBackend {
    pub fn new(dim: usize, pooling: Pooling, seed: u64, noise: f64, mut vocab: Vec<String>) -> Self {
        vocab.sort();
        vocab.dedup();
        let mut h = Sha256::new();
        for c in &vocab {
            h.update(c.as_bytes());
            h.update([0u8]);
        }
        let vocab_tag = &hex::encode(h.finalize())[..8];
        StructuredMockBackend {
            descriptor: BackendDescriptor {
                backend_id: format!("structured-mock-d{dim}-{pooling}-s{seed}-n{noise}-v{vocab_tag}"),
                dim,
                pooling,
                endpoint: None,
            },
            seed,
            noise,
            vocab,
        }
    }

    fn category_of(text: &str) -> Option<&str> {
        text.lines().find_map(|l| l.strip_prefix("Category: ")).map(str::trim)
    }
}

impl FeatureBackend for StructuredMockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn hidden_state(&self, text: &str) -> Result<Vec<f32>> {
        let dim = self.descriptor.dim;
        let mut v: Vec<f64> = causal_states(self.seed, text, dim, self.descriptor.pooling)
            .into_iter()
            .map(|x| x * self.noise)
            .collect();
        if let Some(idx) = Self::category_of(text)
            .and_then(|c| self.vocab.binary_search_by(|v| v.as_str().cmp(c)).ok())
        {
            v[idx % dim] += 1.0;
        }
        Ok(v.into_iter().map(|x| x as f32).collect())
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    text: &'a str,
    pooling: Pooling,
}

#[derive(Deserialize)]
struct RemoteResponse {
    hidden: Vec<f32>,
}

/// HTTP backend: `POST {text}` → `{hidden: [D floats]}`.
pub struct RemoteBackend {
    descriptor: BackendDescriptor,
    http: reqwest::blocking::Client,
    retries: u32,
    max_tokens: Option<usize>,
}

impl RemoteBackend {
    pub fn new(
        endpoint: &str,
        model_name: &str,
        dim: usize,
        pooling: Pooling,
        max_tokens: Option<usize>,
    ) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(RemoteBackend {
            descriptor: BackendDescriptor {
                backend_id: format!("remote-{model_name}-d{dim}-{pooling}"),
                dim,
                pooling,
                endpoint: Some(endpoint.to_string()),
            },
            http,
            retries: 3,
            max_tokens,
        })
    }

    fn once(&self, text: &str) -> Result<Vec<f32>> {
        let endpoint = self.descriptor.endpoint.as_deref().unwrap_or_default();
        let resp = self
            .http
            .post(endpoint)
            .json(&RemoteRequest {
                text,
                pooling: self.descriptor.pooling,
            })
            .send()
            .map_err(|e| Error::Backend(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Backend(format!("HTTP {}", resp.status())));
        }
        let body: RemoteResponse = resp.json().map_err(|e| Error::Backend(e.to_string()))?;
        Ok(body.hidden)
    }
}

impl FeatureBackend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn hidden_state(&self, text: &str) -> Result<Vec<f32>> {
        let truncated;
        let text = match self.max_tokens {
            Some(max) if text.split_whitespace().count() > max => {
                warn!("prompt longer than {max} whitespace tokens; truncating");
                truncated = text.split_whitespace().take(max).collect::<Vec<_>>().join(" ");
                truncated.as_str()
            }
            _ => text,
        };
        let mut last = None;
        for attempt in 0..=self.retries {
            match self.once(text) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    warn!("backend attempt {attempt} failed: {e}");
                    last = Some(e);
                    std::thread::sleep(Duration::from_millis(200 << attempt.min(4)));
                }
            }
        }
        Err(last.unwrap_or_else(|| Error::Backend("no attempts".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_is_deterministic_and_sized() {
        let b = MockBackend::new(16, Pooling::LastToken, 7);
        let a1 = b.hidden_state("hello world?").unwrap();
        let a2 = b.hidden_state("hello world?").unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.len(), 16);
        assert!(a1.iter().all(|v| v.is_finite()));
        assert_ne!(a1, b.hidden_state("hello there?").unwrap());
        assert_ne!(a1, MockBackend::new(16, Pooling::LastToken, 8).hidden_state("hello world?").unwrap());
    }

    #[test]
    fn pooling_modes_differ_and_are_recorded() {
        let last = MockBackend::new(8, Pooling::LastToken, 1);
        let mean = MockBackend::new(8, Pooling::MeanPool, 1);
        assert_ne!(last.descriptor().backend_id, mean.descriptor().backend_id);
        assert_ne!(last.hidden_state("a b c").unwrap(), mean.hidden_state("a b c").unwrap());
        // One token: mean of one state is that state.
        assert_eq!(last.hidden_state("a").unwrap(), mean.hidden_state("a").unwrap());
    }
}
