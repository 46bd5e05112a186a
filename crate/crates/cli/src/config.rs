use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use trialsim::encoder::{RemoteEncoderConfig, TinyEncoderConfig, TrialPooling};
use trialsim::evaluation::{DEFAULT_ITERATIONS, DEFAULT_SAMPLE_SIZE};
use trialsim::model::TrainingConfig;
use trialsim::qa::LlmClientConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub llm: LlmClientConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// AACT export directory or a directory / file of JSONL protocols.
    pub corpus: Option<PathBuf>,
    pub review_groups: Option<PathBuf>,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    /// TREC-style relevance judgments for patient queries.
    pub qrels: Option<PathBuf>,
    /// JSONL of `{patient_id, note}`.
    pub patient_notes: Option<PathBuf>,
}

fn default_workdir() -> PathBuf {
    PathBuf::from("trialsim-out")
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: None,
            review_groups: None,
            workdir: default_workdir(),
            qrels: None,
            patient_notes: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_candidates")]
    pub candidates_per_query: usize,
    #[serde(default = "default_min_grade")]
    pub min_relevant_grade: i32,
    #[serde(default)]
    pub seed: u64,
}

fn default_validation_fraction() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_candidates() -> usize {
    10
}
fn default_min_grade() -> i32 {
    2
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            validation_fraction: default_validation_fraction(),
            test_fraction: default_test_fraction(),
            candidates_per_query: default_candidates(),
            min_relevant_grade: default_min_grade(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderName {
    #[default]
    Tiny,
    Remote,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default)]
    pub name: EncoderName,
    #[serde(default)]
    pub pooling: TrialPooling,
    #[serde(default)]
    pub tiny: TinyEncoderConfig,
    pub remote: Option<RemoteEncoderConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_samples")]
    pub bootstrap_samples: usize,
    #[serde(default = "default_iterations")]
    pub bootstrap_iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLE_SIZE
}
fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            bootstrap_samples: default_samples(),
            bootstrap_iterations: default_iterations(),
            seed: 0,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut config.paths;
        for opt in [
            &mut p.corpus,
            &mut p.review_groups,
            &mut p.qrels,
            &mut p.patient_notes,
        ] {
            if let Some(path) = opt.as_mut() {
                resolve(base, path);
            }
        }
        resolve(base, &mut p.workdir);
        resolve(base, &mut config.llm.cache_dir);
        Ok(config)
    }

    /// Threads one seed through every stochastic stage.
    pub fn apply_seed(&mut self, seed: u64) {
        self.training.seed = seed;
        self.split.seed = seed;
        self.evaluation.seed = seed;
        self.encoder.tiny.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.training
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.encoder
            .tiny
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.encoder.name == EncoderName::Remote && self.encoder.remote.is_none() {
            return Err(CliError::Config(
                "encoder.name = \"remote\" needs an [encoder.remote] table".into(),
            ));
        }
        if self.evaluation.bootstrap_samples == 0 || self.evaluation.bootstrap_iterations == 0 {
            return Err(CliError::Config("bootstrap sizes must be positive".into()));
        }
        Ok(())
    }

    /// A path that must exist before a stage starts.
    pub fn required<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        let path = path
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("paths.{key} is not set")))?;
        if !path.exists() {
            return Err(CliError::Config(format!(
                "paths.{key} does not exist: {}",
                path.display()
            )));
        }
        Ok(path)
    }
}
