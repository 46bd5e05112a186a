//! Chat-completion client with a content-addressed completion cache.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Instruction sent ahead of the eligibility text.
pub const ELIGIBILITY_PROMPT: &str = "You are an expert at creating key questions from a medical text and extracting the answers from the text. Extract 3-10 Q/A pairs without repetitions of key entities in the Q/As. Avoid general questions like 'What are the exclusion criteria?' Make sure that an answer is no more than 5 tokens/words. Output only json-formated Q/A pairs like this: {'Question': 'question1', 'Answer': 'answer1'} {'Question': 'question2', 'Answer': 'answer2'} ... Input:";

/// Environment variable holding the bearer token for the endpoint, if any.
pub const API_KEY_ENV: &str = "TRIALSIM_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_text: String,
    pub max_pairs: usize,
    pub min_pairs: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system_text: ELIGIBILITY_PROMPT.to_string(),
            max_pairs: 10,
            min_pairs: 3,
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if !self.system_text.contains("Extract 3-10 Q/A pairs") {
            return Err(Error::Config(
                "prompt template must ask for 3-10 Q/A pairs".into(),
            ));
        }
        Ok(())
    }

    /// The single user turn sent for `criteria_text`.
    pub fn render(&self, criteria_text: &str) -> String {
        format!("{}\n{}", self.system_text, criteria_text.trim())
    }
}

fn default_endpoint() -> String {
    "http://localhost:8000/v1/chat/completions".into()
}
fn default_model() -> String {
    "meta-llama/Llama-3.1-8B-Instruct".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> usize {
    3
}
fn default_cache_dir() -> PathBuf {
    PathBuf::from("llm_cache")
}
fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmClientConfig {
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    /// Cache-only operation; a miss is an error, the network is never touched.
    #[serde(default)]
    pub offline: bool,
    /// Width of the request pool.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: default_endpoint(),
            model_name: default_model(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            cache_dir: default_cache_dir(),
            offline: false,
            parallelism: default_parallelism(),
        }
    }
}

/// Something that turns a prompt into a completion.
pub trait Completer: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// OpenAI-compatible chat-completions transport, greedy decoding.
pub struct HttpCompleter {
    endpoint: String,
    model: String,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpCompleter {
    pub fn new(config: &LlmClientConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpCompleter {
            endpoint: config.endpoint.clone(),
            model: config.model_name.clone(),
            client,
            api_key: std::env::var(API_KEY_ENV).ok(),
        })
    }
}

impl Completer for HttpCompleter {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let unavailable = |message: String| Error::LlmUnavailable {
            attempts: 1,
            message,
        };
        let resp = req.send().map_err(|e| unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(unavailable(format!("HTTP {}", resp.status())));
        }
        let value: serde_json::Value = resp.json().map_err(|e| unavailable(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| unavailable("response has no message content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub model_name: String,
    pub completion: String,
}

/// Completion cache keyed by (model name, criteria text).
#[derive(Debug, Clone)]
pub struct CompletionCache {
    dir: PathBuf,
}

impl CompletionCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CompletionCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(model_name: &str, criteria_text: &str) -> String {
        let mut h = Sha256::new();
        h.update(model_name.as_bytes());
        h.update([0u8]);
        h.update(criteria_text.trim().as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>> {
        let path = self.path(key);
        match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).map(Some).map_err(|e| Error::Json {
                line: 1,
                message: format!("{}: {e}", path.display()),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Writes through a temporary file and an atomic rename, so readers
    /// never observe a partial entry.
    pub fn put(&self, key: &str, entry: &CacheEntry) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(key);
        let tmp = self.dir.join(format!(
            ".{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        let body = serde_json::to_string_pretty(entry).expect("cache entry serializes");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(body.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Cache-fronted completion client.
pub struct LlmClient {
    pub config: LlmClientConfig,
    cache: CompletionCache,
    completer: Option<Box<dyn Completer>>,
}

impl LlmClient {
    /// Builds a client; the HTTP transport is only created when online.
    pub fn new(config: LlmClientConfig) -> Result<Self> {
        let completer: Option<Box<dyn Completer>> = if config.offline {
            None
        } else {
            Some(Box::new(HttpCompleter::new(&config)?))
        };
        Ok(Self::with_completer(config, completer))
    }

    pub fn with_completer(config: LlmClientConfig, completer: Option<Box<dyn Completer>>) -> Self {
        let cache = CompletionCache::new(config.cache_dir.clone());
        LlmClient {
            config,
            cache,
            completer,
        }
    }

    pub fn cache(&self) -> &CompletionCache {
        &self.cache
    }

    /// Returns the completion for `criteria_text`, consulting the cache first.
    pub fn completion(&self, template: &PromptTemplate, criteria_text: &str) -> Result<String> {
        let key = CompletionCache::key(&self.config.model_name, criteria_text);
        if let Some(hit) = self.cache.get(&key)? {
            return Ok(hit.completion);
        }
        let completer = match (&self.completer, self.config.offline) {
            (Some(c), false) => c,
            _ => return Err(Error::CacheMiss(key)),
        };
        let prompt = template.render(criteria_text);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match completer.complete(&prompt) {
                Ok(completion) => {
                    self.cache.put(
                        &key,
                        &CacheEntry {
                            model_name: self.config.model_name.clone(),
                            completion: completion.clone(),
                        },
                    )?;
                    return Ok(completion);
                }
                Err(Error::LlmUnavailable { message, .. }) => {
                    log::warn!("LLM attempt {}/{attempts} failed: {message}", attempt + 1);
                    last = message;
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(Error::LlmUnavailable {
            attempts,
            message: last,
        })
    }
}
