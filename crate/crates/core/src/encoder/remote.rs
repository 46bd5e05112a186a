//! Adapter for a pretrained transformer encoder served behind an
//! OpenAI-style `/embeddings` endpoint. Inference only.

use std::marker::PhantomData;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::Backbone;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteEncoderConfig {
    pub endpoint: String,
    pub model: String,
    pub dim: usize,
    /// Whitespace-word budget applied before the request.
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_max_tokens() -> usize {
    512
}
fn default_timeout() -> u64 {
    60
}

pub struct RemoteEncoder<F> {
    config: RemoteEncoderConfig,
    client: reqwest::blocking::Client,
    truncations: AtomicU64,
    _scalar: PhantomData<F>,
}

impl<F: Scalar> RemoteEncoder<F> {
    pub fn new(config: RemoteEncoderConfig) -> Result<Self> {
        if config.dim == 0 || config.max_tokens == 0 {
            return Err(Error::Config(
                "remote encoder needs positive dim and max_tokens".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(RemoteEncoder {
            config,
            client,
            truncations: AtomicU64::new(0),
            _scalar: PhantomData,
        })
    }

    fn truncate<'a>(&self, text: &'a str) -> std::borrow::Cow<'a, str> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() <= self.config.max_tokens {
            return text.into();
        }
        self.truncations.fetch_add(1, Ordering::Relaxed);
        words[..self.config.max_tokens].join(" ").into()
    }
}

impl<F: Scalar> Backbone<F> for RemoteEncoder<F> {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_tokens(&self) -> usize {
        self.config.max_tokens
    }

    fn trainable(&self) -> bool {
        false
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<F>> {
        if text.trim().is_empty() {
            return Err(Error::TokenizationFailure("empty text".into()));
        }
        let body = json!({"model": self.config.model, "input": [self.truncate(text)]});
        let fail = |m: String| Error::TokenizationFailure(format!("embedding request: {m}"));
        let resp = self
            .client
            .post(&self.config.endpoint)
            .json(&body)
            .send()
            .map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("HTTP {}", resp.status())));
        }
        let value: serde_json::Value = resp.json().map_err(|e| fail(e.to_string()))?;
        let vector = value["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| fail("no embedding in response".into()))?
            .iter()
            .map(|x| x.as_f64().map(F::of))
            .collect::<Option<Vec<F>>>()
            .ok_or_else(|| fail("non-numeric embedding".into()))?;
        if vector.len() != self.config.dim {
            return Err(Error::DimensionMismatch(vector.len(), self.config.dim));
        }
        Ok(vector)
    }

    fn truncations(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }
}
