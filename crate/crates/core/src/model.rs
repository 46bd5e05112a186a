//! Domain types, their invariants, and the line-delimited record format.
//!
//! Every type here validates from its own value alone; the record readers
//! run that validation on each line and refuse anything that breaks it.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Separator used whenever a list-valued section is flattened to text.
pub const LIST_SEPARATOR: &str = ", ";

/// Default number of LLM pairs kept per trial.
pub const DEFAULT_QA_CAP: usize = 10;

/// Default candidate-list length for evaluation queries.
pub const DEFAULT_CANDIDATES: usize = 10;

/// The six protocol sections, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Title,
    Disease,
    Intervention,
    Keywords,
    Outcome,
    EligibilityCriteria,
}

impl Section {
    pub const ALL: [Section; 6] = [
        Section::Title,
        Section::Disease,
        Section::Intervention,
        Section::Keywords,
        Section::Outcome,
        Section::EligibilityCriteria,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Section::Title => "title",
            Section::Disease => "disease",
            Section::Intervention => "intervention",
            Section::Keywords => "keywords",
            Section::Outcome => "outcome",
            Section::EligibilityCriteria => "eligibility_criteria",
        }
    }

    pub fn parse(s: &str) -> Option<Section> {
        Section::ALL.into_iter().find(|sec| sec.as_str() == s)
    }

    fn is_list(self) -> bool {
        matches!(
            self,
            Section::Disease | Section::Intervention | Section::Keywords
        )
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One source document.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrialProtocol {
    pub trial_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub disease: Vec<String>,
    #[serde(default)]
    pub intervention: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub outcome: String,
    #[serde(default)]
    pub eligibility_criteria: String,
}

impl TrialProtocol {
    /// Section content flattened to a single string.
    pub fn section_text(&self, section: Section) -> String {
        match section {
            Section::Title => self.title.trim().to_string(),
            Section::Disease => join_list(&self.disease),
            Section::Intervention => join_list(&self.intervention),
            Section::Keywords => join_list(&self.keywords),
            Section::Outcome => self.outcome.trim().to_string(),
            Section::EligibilityCriteria => self.eligibility_criteria.trim().to_string(),
        }
    }

    pub fn is_section_empty(&self, section: Section) -> bool {
        self.section_text(section).is_empty()
    }

    /// All non-empty sections in canonical order, newline separated.
    pub fn flattened_text(&self) -> String {
        Section::ALL
            .iter()
            .map(|&s| self.section_text(s))
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn word_count(&self) -> usize {
        self.flattened_text().split_whitespace().count()
    }

    /// Lower-cased disease strings, for same-indication matching.
    pub fn disease_keys(&self) -> BTreeSet<String> {
        self.disease
            .iter()
            .map(|d| d.trim().to_lowercase())
            .filter(|d| !d.is_empty())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trial_id.trim().is_empty() {
            return Err(Error::MissingId);
        }
        if Section::ALL.iter().all(|&s| self.is_section_empty(s)) {
            return Err(Error::EmptyProtocol(self.trial_id.clone()));
        }
        Ok(())
    }
}

fn join_list(items: &[String]) -> String {
    items
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(LIST_SEPARATOR)
}

/// Result of [`validate_protocol`]: the protocol plus keys that were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedProtocol {
    pub protocol: TrialProtocol,
    pub dropped_keys: Vec<String>,
}

/// Builds a protocol from a raw key/value record.
///
/// List sections accept either a string or an array of strings and are
/// deduplicated preserving first occurrence. Keys outside the six sections
/// (and `trial_id`) are logged and dropped.
pub fn validate_protocol(record: &Map<String, Value>) -> Result<ValidatedProtocol> {
    let trial_id = match record.get("trial_id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        _ => return Err(Error::MissingId),
    };
    let mut protocol = TrialProtocol {
        trial_id,
        ..Default::default()
    };
    let mut dropped_keys = Vec::new();
    for (key, value) in record {
        if key == "trial_id" {
            continue;
        }
        let Some(section) = Section::parse(key) else {
            log::warn!(
                "trial {}: unknown section `{key}` dropped",
                protocol.trial_id
            );
            dropped_keys.push(key.clone());
            continue;
        };
        if section.is_list() {
            let items = dedup_preserving(value_to_list(value));
            match section {
                Section::Disease => protocol.disease = items,
                Section::Intervention => protocol.intervention = items,
                Section::Keywords => protocol.keywords = items,
                _ => unreachable!(),
            }
        } else {
            let text = value_to_text(value);
            match section {
                Section::Title => protocol.title = text,
                Section::Outcome => protocol.outcome = text,
                Section::EligibilityCriteria => protocol.eligibility_criteria = text,
                _ => unreachable!(),
            }
        }
    }
    protocol.validate()?;
    Ok(ValidatedProtocol {
        protocol,
        dropped_keys,
    })
}

fn value_to_list(value: &Value) -> Vec<String> {
    match value {
        Value::Null => Vec::new(),
        Value::String(s) => vec![s.trim().to_string()],
        Value::Array(items) => items.iter().map(value_to_text).collect(),
        other => vec![other.to_string()],
    }
}

fn value_to_text(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.trim().to_string(),
        Value::Array(items) => items
            .iter()
            .map(value_to_text)
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(LIST_SEPARATOR),
        other => other.to_string(),
    }
}

pub(crate) fn dedup_preserving(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items
        .into_iter()
        .filter(|s| !s.is_empty() && seen.insert(s.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Llm,
    Predefined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub section: Section,
    pub origin: Origin,
    pub ordinal: u32,
}

impl QaPair {
    /// Text fed to the encoder: question and answer joined by one space.
    pub fn text(&self) -> String {
        format!("{} {}", self.question.trim(), self.answer.trim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() || self.answer.trim().is_empty() {
            return Err(Error::SchemaViolation(format!(
                "empty question or answer in {} pair {}",
                self.section, self.ordinal
            )));
        }
        let llm_section = self.section == Section::EligibilityCriteria;
        if (self.origin == Origin::Llm) != llm_section {
            return Err(Error::SchemaViolation(format!(
                "origin {:?} not allowed for section {}",
                self.origin, self.section
            )));
        }
        Ok(())
    }
}

/// A trial represented as an ordered set of Q/A pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialQaSet {
    pub trial_id: String,
    pub pairs: Vec<QaPair>,
}

impl TrialQaSet {
    /// Builds a set, putting pairs into canonical (section, ordinal) order.
    pub fn new(trial_id: impl Into<String>, mut pairs: Vec<QaPair>) -> Self {
        pairs.sort_by_key(|p| (p.section, p.ordinal));
        TrialQaSet {
            trial_id: trial_id.into(),
            pairs,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.pairs
            .windows(2)
            .all(|w| (w[0].section, w[0].ordinal) <= (w[1].section, w[1].ordinal))
    }

    pub fn section_pairs(&self, section: Section) -> impl Iterator<Item = &QaPair> {
        self.pairs.iter().filter(move |p| p.section == section)
    }

    pub fn llm_count(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.origin == Origin::Llm)
            .count()
    }

    /// Pair texts in canonical order.
    pub fn texts(&self) -> Vec<String> {
        self.pairs.iter().map(QaPair::text).collect()
    }

    pub fn word_count(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.text().split_whitespace().count())
            .sum()
    }

    /// Copy with the pair at `index` removed and ordinals of its section renumbered.
    pub fn without_pair(&self, index: usize) -> TrialQaSet {
        let removed = &self.pairs[index];
        let section = removed.section;
        let mut pairs: Vec<QaPair> = self
            .pairs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != index)
            .map(|(_, p)| p.clone())
            .collect();
        let mut next = 0;
        for p in pairs.iter_mut().filter(|p| p.section == section) {
            p.ordinal = next;
            next += 1;
        }
        TrialQaSet {
            trial_id: self.trial_id.clone(),
            pairs,
        }
    }

    pub fn validate(&self, qa_cap: usize) -> Result<()> {
        if self.trial_id.trim().is_empty() {
            return Err(Error::MissingId);
        }
        for p in &self.pairs {
            p.validate()?;
        }
        if !self.is_canonical() {
            return Err(Error::SchemaViolation(format!(
                "pairs of {} are not in canonical order",
                self.trial_id
            )));
        }
        for section in Section::ALL {
            for (expected, p) in self.section_pairs(section).enumerate() {
                if p.ordinal as usize != expected {
                    return Err(Error::SchemaViolation(format!(
                        "{} section {} ordinals are not consecutive from 0",
                        self.trial_id, section
                    )));
                }
            }
        }
        let llm = self.llm_count();
        if llm > qa_cap {
            return Err(Error::SchemaViolation(format!(
                "{} carries {llm} llm pairs, cap is {qa_cap}",
                self.trial_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Review,
    SameDiseaseNegative,
    RandomNegative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityLabel {
    pub query_trial_id: String,
    pub candidate_trial_id: String,
    pub relevant: bool,
    pub source: LabelSource,
}

impl SimilarityLabel {
    pub fn validate(&self) -> Result<()> {
        if self.query_trial_id == self.candidate_trial_id {
            return Err(Error::SchemaViolation(format!(
                "label pairs {} with itself",
                self.query_trial_id
            )));
        }
        Ok(())
    }
}

/// Checks that (query, candidate) pairs are unique across a label list.
pub fn validate_labels(labels: &[SimilarityLabel]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for l in labels {
        l.validate()?;
        if !seen.insert((&l.query_trial_id, &l.candidate_trial_id)) {
            return Err(Error::SchemaViolation(format!(
                "duplicate label ({}, {})",
                l.query_trial_id, l.candidate_trial_id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    FullTrial,
    Partial,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub trial_id: String,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub query_id: String,
    pub query_kind: QueryKind,
    pub candidates: Vec<Candidate>,
}

impl EvalQuery {
    pub fn relevant_ids(&self) -> BTreeSet<String> {
        self.candidates
            .iter()
            .filter(|c| c.relevant)
            .map(|c| c.trial_id.clone())
            .collect()
    }

    pub fn candidate_ids(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.trial_id.clone()).collect()
    }

    /// `expected_len` of `None` accepts any list length (judged patient pools).
    pub fn validate(&self, expected_len: Option<usize>) -> Result<()> {
        if let Some(n) = expected_len {
            if self.candidates.len() != n {
                return Err(Error::SchemaViolation(format!(
                    "query {} has {} candidates, expected {n}",
                    self.query_id,
                    self.candidates.len()
                )));
            }
        }
        if !self.candidates.iter().any(|c| c.relevant) {
            return Err(Error::SchemaViolation(format!(
                "query {} has no relevant candidate",
                self.query_id
            )));
        }
        let distinct: BTreeSet<_> = self.candidates.iter().map(|c| &c.trial_id).collect();
        if distinct.len() != self.candidates.len() {
            return Err(Error::SchemaViolation(format!(
                "query {} lists a candidate twice",
                self.query_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectKind {
    Trial,
    QaPair,
    Patient,
}

/// Tolerance on the unit-norm invariant of stored embeddings.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub subject_id: String,
    pub subject_kind: SubjectKind,
    pub vector: Vec<f64>,
    pub dim: usize,
}

impl EmbeddingRecord {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.vector.len() != self.dim {
            return Err(Error::SchemaViolation(format!(
                "embedding {} has {} components, dim {}",
                self.subject_id,
                self.vector.len(),
                self.dim
            )));
        }
        if self.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::SchemaViolation(format!(
                "embedding {} has a non-finite component",
                self.subject_id
            )));
        }
        let norm = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() >= NORM_TOLERANCE {
            return Err(Error::SchemaViolation(format!(
                "embedding {} has norm {norm}",
                self.subject_id
            )));
        }
        Ok(())
    }
}

fn default_tau() -> f64 {
    0.1
}
fn default_lr_local() -> f64 {
    2e-5
}
fn default_lr_global() -> f64 {
    1e-6
}
fn default_epochs() -> usize {
    10
}
fn default_batch_local() -> usize {
    32
}
fn default_batch_global() -> usize {
    16
}
fn default_qa_cap() -> usize {
    DEFAULT_QA_CAP
}
fn default_weight_decay() -> f64 {
    0.01
}

/// Every training hyperparameter in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lr_local")]
    pub lr_local: f64,
    #[serde(default = "default_lr_global")]
    pub lr_global: f64,
    #[serde(default = "default_epochs")]
    pub epochs_local: usize,
    #[serde(default = "default_epochs")]
    pub epochs_global: usize,
    #[serde(default = "default_batch_local")]
    pub batch_local: usize,
    #[serde(default = "default_batch_global")]
    pub batch_global: usize,
    #[serde(default = "default_qa_cap")]
    pub qa_cap: usize,
    #[serde(default)]
    pub seed: u64,
    /// Probability that a global batch slot is filled by a labeled anchor.
    /// `None` uses the labeled share of the corpus.
    #[serde(default)]
    pub labeled_fraction: Option<f64>,
    /// AdamW decoupled weight decay.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            tau: default_tau(),
            lr_local: default_lr_local(),
            lr_global: default_lr_global(),
            epochs_local: default_epochs(),
            epochs_global: default_epochs(),
            batch_local: default_batch_local(),
            batch_global: default_batch_global(),
            qa_cap: default_qa_cap(),
            seed: 0,
            labeled_fraction: None,
            weight_decay: default_weight_decay(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("tau", self.tau)?;
        positive("lr_local", self.lr_local)?;
        positive("lr_global", self.lr_global)?;
        for (name, v) in [
            ("batch_local", self.batch_local),
            ("batch_global", self.batch_global),
            ("qa_cap", self.qa_cap),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if let Some(f) = self.labeled_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "labeled_fraction must lie in [0,1], got {f}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Context for validating records read from disk.
#[derive(Debug, Clone, Copy)]
pub struct RecordContext {
    pub qa_cap: usize,
    pub candidates: Option<usize>,
}

impl Default for RecordContext {
    fn default() -> Self {
        RecordContext {
            qa_cap: DEFAULT_QA_CAP,
            candidates: Some(DEFAULT_CANDIDATES),
        }
    }
}

/// A value that can live in a line-delimited record file.
pub trait Record: Serialize + DeserializeOwned {
    fn check(&self, ctx: &RecordContext) -> Result<()>;
}

impl Record for TrialProtocol {
    fn check(&self, _: &RecordContext) -> Result<()> {
        self.validate()
            .map_err(|e| Error::SchemaViolation(e.to_string()))
    }
}

impl Record for TrialQaSet {
    fn check(&self, ctx: &RecordContext) -> Result<()> {
        self.validate(ctx.qa_cap)
    }
}

impl Record for SimilarityLabel {
    fn check(&self, _: &RecordContext) -> Result<()> {
        self.validate()
    }
}

impl Record for EvalQuery {
    fn check(&self, ctx: &RecordContext) -> Result<()> {
        let expected = match self.query_kind {
            QueryKind::Patient => None,
            _ => ctx.candidates,
        };
        self.validate(expected)
    }
}

impl Record for EmbeddingRecord {
    fn check(&self, _: &RecordContext) -> Result<()> {
        self.validate()
    }
}

pub fn to_line<T: Record>(value: &T) -> String {
    serde_json::to_string(value).expect("domain types serialize")
}

pub fn from_line<T: Record>(line: &str, ctx: &RecordContext) -> Result<T> {
    let value: T = serde_json::from_str(line).map_err(|e| Error::Json {
        line: 1,
        message: e.to_string(),
    })?;
    value.check(ctx)?;
    Ok(value)
}

pub fn write_records<'a, T: Record + 'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        writeln!(out, "{}", to_line(r)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates every non-blank line of a record file.
pub fn read_records<T: Record>(path: impl AsRef<Path>, ctx: &RecordContext) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| Error::Json {
            line: i + 1,
            message: e.to_string(),
        })?;
        value.check(ctx).map_err(|e| match e {
            Error::SchemaViolation(m) => Error::SchemaViolation(format!("line {}: {m}", i + 1)),
            other => Error::SchemaViolation(format!("line {}: {other}", i + 1)),
        })?;
        out.push(value);
    }
    Ok(out)
}
