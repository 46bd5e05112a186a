//! Desk-scale trainable encoder: hashed word embeddings, a square projection
//! applied per token, and mean pooling.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenize::{bucket, tokenize};
use super::Backbone;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn default_vocab() -> usize {
    4096
}
fn default_dim() -> usize {
    64
}
fn default_max_tokens() -> usize {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyEncoderConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TinyEncoderConfig {
    fn default() -> Self {
        TinyEncoderConfig {
            vocab_size: default_vocab(),
            dim: default_dim(),
            max_tokens: default_max_tokens(),
            seed: 0,
        }
    }
}

impl TinyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.max_tokens == 0 {
            return Err(Error::Config(
                "encoder vocab_size, dim and max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Cached activations of one forward pass, needed for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward<F> {
    pub token_ids: Vec<usize>,
    pub pooled: Vec<F>,
    /// Pre-normalization output.
    pub output: Vec<F>,
}

/// Accumulated parameter gradients. Embedding rows are sparse and kept in
/// a sorted map so accumulation order is reproducible.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub embeddings: BTreeMap<usize, Vec<F>>,
    pub projection: Vec<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(dim: usize) -> Self {
        Gradients {
            embeddings: BTreeMap::new(),
            projection: vec![F::zero(); dim * dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.projection.iter().all(|x| x.is_finite())
            && self
                .embeddings
                .values()
                .all(|r| r.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug)]
pub struct TinyEncoder<F> {
    name: String,
    config: TinyEncoderConfig,
    /// Row-major `vocab_size × dim`.
    embeddings: Vec<F>,
    /// Row-major `dim × dim`; token state is `projection · embedding`.
    projection: Vec<F>,
    truncations: AtomicU64,
}

impl<F: Scalar> Clone for TinyEncoder<F> {
    fn clone(&self) -> Self {
        TinyEncoder {
            name: self.name.clone(),
            config: self.config.clone(),
            embeddings: self.embeddings.clone(),
            projection: self.projection.clone(),
            truncations: AtomicU64::new(self.truncations.load(Ordering::Relaxed)),
        }
    }
}

impl<F: Scalar> PartialEq for TinyEncoder<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embeddings == other.embeddings
            && self.projection == other.projection
    }
}

impl<F: Scalar> TinyEncoder<F> {
    /// Random embeddings (uniform, unit expected row norm) and an identity projection.
    pub fn new(config: TinyEncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = (3.0 / config.dim as f64).sqrt();
        let embeddings = (0..config.vocab_size * config.dim)
            .map(|_| F::of(rng.gen_range(-bound..bound)))
            .collect();
        let mut projection = vec![F::zero(); config.dim * config.dim];
        for i in 0..config.dim {
            projection[i * config.dim + i] = F::one();
        }
        Ok(TinyEncoder {
            name: "tiny".into(),
            config,
            embeddings,
            projection,
            truncations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &TinyEncoderConfig {
        &self.config
    }

    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::TokenizationFailure(format!(
                "no tokens in {:?}",
                text.chars().take(40).collect::<String>()
            )));
        }
        if tokens.len() > self.config.max_tokens {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            tokens.truncate(self.config.max_tokens);
        }
        Ok(tokens
            .iter()
            .map(|t| bucket(t, self.config.vocab_size))
            .collect())
    }

    pub fn forward(&self, text: &str) -> Result<Forward<F>> {
        let token_ids = self.token_ids(text)?;
        let dim = self.config.dim;
        let mut pooled = vec![F::zero(); dim];
        for &id in &token_ids {
            let row = &self.embeddings[id * dim..(id + 1) * dim];
            for (p, &e) in pooled.iter_mut().zip(row) {
                *p += e;
            }
        }
        let count = F::of_usize(token_ids.len());
        for p in pooled.iter_mut() {
            *p /= count;
        }
        let output = (0..dim)
            .map(|r| {
                self.projection[r * dim..(r + 1) * dim]
                    .iter()
                    .zip(&pooled)
                    .map(|(&w, &x)| w * x)
                    .sum()
            })
            .collect();
        Ok(Forward {
            token_ids,
            pooled,
            output,
        })
    }

    /// Accumulates parameter gradients given `d loss / d output`.
    pub fn backward(&self, fwd: &Forward<F>, grad_output: &[F], grads: &mut Gradients<F>) {
        let dim = self.config.dim;
        for r in 0..dim {
            let g = grad_output[r];
            if g == F::zero() {
                continue;
            }
            let row = &mut grads.projection[r * dim..(r + 1) * dim];
            for (acc, &x) in row.iter_mut().zip(&fwd.pooled) {
                *acc += g * x;
            }
        }
        let mut grad_pooled = vec![F::zero(); dim];
        for (r, &g) in grad_output.iter().enumerate() {
            for (c, gp) in grad_pooled.iter_mut().enumerate() {
                *gp += self.projection[r * dim + c] * g;
            }
        }
        let scale = F::one() / F::of_usize(fwd.token_ids.len());
        for &id in &fwd.token_ids {
            let row = grads
                .embeddings
                .entry(id)
                .or_insert_with(|| vec![F::zero(); dim]);
            for (acc, &g) in row.iter_mut().zip(&grad_pooled) {
                *acc += g * scale;
            }
        }
    }

    /// Mutable views of (embeddings, projection) for the optimizer.
    pub fn parameters_mut(&mut self) -> (&mut [F], &mut [F]) {
        (&mut self.embeddings, &mut self.projection)
    }

    pub fn parameter_count(&self) -> usize {
        self.embeddings.len() + self.projection.len()
    }

    /// Writes `encoder.json` (configuration) and `weights.bin` (little-endian
    /// f64 embeddings then projection) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = dir.join("encoder.json");
        let body = serde_json::to_string_pretty(&SavedEncoder {
            name: self.name.clone(),
            config: self.config.clone(),
        })
        .expect("encoder metadata serializes");
        fs::write(&meta, body + "\n").map_err(|e| Error::io(&meta, e))?;
        let path = dir.join("weights.bin");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for &w in self.embeddings.iter().chain(&self.projection) {
            out.write_f64::<LittleEndian>(w.to_f64_lossy())
                .map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = dir.join("encoder.json");
        let body = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let saved: SavedEncoder = serde_json::from_str(&body).map_err(|e| Error::Json {
            line: 1,
            message: format!("{}: {e}", meta.display()),
        })?;
        let mut encoder = TinyEncoder::new(saved.config)?;
        encoder.name = saved.name;
        let path = dir.join("weights.bin");
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut input = BufReader::new(file);
        let n_emb = encoder.embeddings.len();
        for i in 0..encoder.parameter_count() {
            let v = F::of(
                input
                    .read_f64::<LittleEndian>()
                    .map_err(|e| Error::io(&path, e))?,
            );
            if i < n_emb {
                encoder.embeddings[i] = v;
            } else {
                encoder.projection[i - n_emb] = v;
            }
        }
        let mut rest = Vec::new();
        input
            .read_to_end(&mut rest)
            .map_err(|e| Error::io(&path, e))?;
        if !rest.is_empty() {
            return Err(Error::SchemaViolation(format!(
                "{} has {} trailing bytes",
                path.display(),
                rest.len()
            )));
        }
        Ok(encoder)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedEncoder {
    name: String,
    config: TinyEncoderConfig,
}

impl<F: Scalar> Backbone<F> for TinyEncoder<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn max_tokens(&self) -> usize {
        self.config.max_tokens
    }

    fn trainable(&self) -> bool {
        true
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<F>> {
        Ok(self.forward(text)?.output)
    }

    fn truncations(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }
}
