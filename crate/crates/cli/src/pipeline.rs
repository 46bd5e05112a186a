use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use trialsim::encoder::{encode_trial, trial_text, Backbone, RemoteEncoder, TinyEncoder};
use trialsim::evaluation::{
    evaluate, Bm25, BootstrapSpec, DenseRetriever, PrecomputedRetriever, QueryInput, Retriever,
    TfIdf,
};
use trialsim::ingest::{
    build_eval_queries, build_labels, ingest_corpus, member_ids, read_trec_qrels, split_groups,
    PatientNote, ReviewGroup,
};
use trialsim::model::{
    read_records, write_records, EmbeddingRecord, EvalQuery, RecordContext, Section,
    SimilarityLabel, SubjectKind, TrialProtocol, TrialQaSet,
};
use trialsim::qa::{assemble_corpus, EligibilitySource, LlmClient, PromptTemplate};
use trialsim::retrieval::{search_full, search_partial, search_patient, PartialQuery, TrialIndex};
use trialsim::training::{disease_index, train, EpochLog, Stage, Stages, TrainingData};

use crate::config::{EncoderName, PipelineConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const TRIALS: &str = "trials.jsonl";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const LABELS: &str = "labels.jsonl";
pub const SPLIT: &str = "split.json";
pub const VALIDATION_QUERIES: &str = "validation_queries.jsonl";
pub const TEST_QUERIES: &str = "test_queries.jsonl";
pub const PATIENT_QUERIES: &str = "patient_queries.jsonl";
pub const QA_SETS: &str = "qa_sets.jsonl";
pub const TRAINING_REPORT: &str = "training_report.json";
pub const EMBEDDINGS: &str = "embeddings.jsonl";
pub const INDEX_META: &str = "index.json";

pub struct Pipeline {
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    Full,
    Partial,
    Patient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrieverKind {
    Secret,
    TfIdf,
    Bm25,
    EmbeddingsFile,
}

impl RetrieverKind {
    pub fn name(self) -> &'static str {
        match self {
            RetrieverKind::Secret => "secret",
            RetrieverKind::TfIdf => "tfidf",
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::EmbeddingsFile => "embeddings-file",
        }
    }
}

pub struct SearchRequest {
    pub mode: QueryMode,
    pub trial: Option<String>,
    pub title: Option<String>,
    pub sections: Vec<(Section, String)>,
    pub note_file: Option<PathBuf>,
    pub k: usize,
    pub candidates_file: Option<PathBuf>,
}

pub struct EvaluateRequest {
    pub retriever: RetrieverKind,
    pub mode: QueryMode,
    pub queries: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub partial_sections: Vec<Section>,
    pub name: Option<String>,
}

/// The encoder a stage runs with, plus the checkpoint it came from.
pub enum Model {
    Tiny(TinyEncoder<f64>, String),
    Remote(RemoteEncoder<f64>),
}

impl Model {
    pub fn backbone(&self) -> &dyn Backbone<f64> {
        match self {
            Model::Tiny(m, _) => m,
            Model::Remote(m) => m,
        }
    }

    pub fn checkpoint(&self) -> &str {
        match self {
            Model::Tiny(_, c) => c,
            Model::Remote(_) => "pretrained",
        }
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| trialsim::Error::io(parent, e))?;
    }
    let body = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, body + "\n").map_err(|e| trialsim::Error::io(path, e).into())
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let body = fs::read_to_string(path).map_err(|e| trialsim::Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| {
        trialsim::Error::Json {
            line: 1,
            message: format!("{}: {e}", path.display()),
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| trialsim::Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| trialsim::Error::io(path, e).into())
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Pipeline { config }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.paths.workdir.join(name)
    }

    fn ctx(&self) -> RecordContext {
        RecordContext {
            qa_cap: self.config.training.qa_cap,
            candidates: Some(self.config.split.candidates_per_query),
        }
    }

    fn trials(&self) -> Result<Vec<TrialProtocol>> {
        Ok(read_records(self.path(TRIALS), &self.ctx())?)
    }

    fn qa_sets(&self) -> Result<Vec<TrialQaSet>> {
        Ok(read_records(self.path(QA_SETS), &self.ctx())?)
    }

    fn queries(&self, path: &Path) -> Result<Vec<EvalQuery>> {
        Ok(read_records(path, &self.ctx())?)
    }

    fn test_trial_ids(&self) -> Result<BTreeSet<String>> {
        let split = read_json(&self.path(SPLIT))?;
        Ok(split["test_trials"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(String::from))
                    .collect()
            })
            .unwrap_or_default())
    }

    pub fn ingest(&self) -> Result<()> {
        let corpus = self.config.required(&self.config.paths.corpus, "corpus")?;
        let report = ingest_corpus(corpus)?;
        if report.trials.is_empty() {
            return Err(trialsim::Error::EmptyCorpus.into());
        }
        write_records(self.path(TRIALS), &report.trials)?;
        write_json(
            &self.path(INGEST_REPORT),
            &json!({
                "trials": report.trials.len(),
                "malformed": report.malformed,
                "duplicates": report.duplicates,
                "dropped_keys": report.dropped_keys,
            }),
        )?;
        log::info!(
            "ingested {} trials ({} malformed, {} duplicates)",
            report.trials.len(),
            report.malformed,
            report.duplicates
        );
        Ok(())
    }

    pub fn build_eval(&self) -> Result<()> {
        let s = &self.config.split;
        let groups_path = self
            .config
            .required(&self.config.paths.review_groups, "review_groups")?;
        let groups: Vec<ReviewGroup> = read_records(groups_path, &self.ctx())?;
        let corpus = self.trials()?;
        let split = split_groups(&groups, s.validation_fraction, s.test_fraction, s.seed)?;
        let test_ids = member_ids(&split.test);

        let train_labels = build_labels(&split.train, &corpus)?;
        let val_labels = build_labels(&split.validation, &corpus)?;
        let test_labels = build_labels(&split.test, &corpus)?;
        let n = s.candidates_per_query;
        let validation = build_eval_queries(&val_labels, &corpus, n, s.seed, &test_ids)?;
        let test = build_eval_queries(&test_labels, &corpus, n, s.seed, &BTreeSet::new())?;

        write_records(self.path(LABELS), &train_labels)?;
        write_records(self.path(VALIDATION_QUERIES), &validation)?;
        write_records(self.path(TEST_QUERIES), &test)?;
        let ids = |g: &[ReviewGroup]| g.iter().map(|g| g.review_id.clone()).collect::<Vec<_>>();
        write_json(
            &self.path(SPLIT),
            &json!({
                "seed": s.seed,
                "train": ids(&split.train),
                "validation": ids(&split.validation),
                "test": ids(&split.test),
                "test_trials": test_ids,
            }),
        )?;

        if let Some(qrels) = &self.config.paths.qrels {
            let corpus_ids = corpus.iter().map(|p| p.trial_id.clone()).collect();
            let patients = read_trec_qrels(qrels, &corpus_ids, s.min_relevant_grade)?;
            write_records(self.path(PATIENT_QUERIES), &patients)?;
        }
        log::info!(
            "{} train labels, {} validation and {} test queries",
            train_labels.len(),
            validation.len(),
            test.len()
        );
        Ok(())
    }

    pub fn generate_qa(&self, skip_llm: bool) -> Result<()> {
        let protocols = self.trials()?;
        let cap = self.config.training.qa_cap;
        let parallelism = self.config.llm.parallelism;
        let sets = if skip_llm {
            assemble_corpus(&protocols, &EligibilitySource::Skip, cap, parallelism)?
        } else {
            let client = LlmClient::new(self.config.llm.clone())?;
            let template = PromptTemplate::default();
            let source = EligibilitySource::Llm {
                client: &client,
                template: &template,
            };
            assemble_corpus(&protocols, &source, cap, parallelism)?
        };
        write_records(self.path(QA_SETS), &sets)?;
        log::info!("wrote {} Q/A sets", sets.len());
        Ok(())
    }

    fn fresh_encoder(&self) -> Result<TinyEncoder<f64>> {
        Ok(TinyEncoder::new(self.config.encoder.tiny.clone())?)
    }

    fn model_dir(&self, stage: Stage) -> PathBuf {
        self.path("models").join(stage.as_str())
    }

    /// Latest trained weights: global, else local, else a fresh init.
    pub fn load_model(&self) -> Result<Model> {
        if self.config.encoder.name == EncoderName::Remote {
            let remote = self.config.encoder.remote.clone().expect("validated");
            return Ok(Model::Remote(RemoteEncoder::new(remote)?));
        }
        for stage in [Stage::Global, Stage::Local] {
            let dir = self.model_dir(stage);
            if dir.join("encoder.json").is_file() {
                return Ok(Model::Tiny(TinyEncoder::load(&dir)?, stage.as_str().into()));
            }
        }
        Ok(Model::Tiny(self.fresh_encoder()?, "init".into()))
    }

    pub fn train(&self, stages: Stages) -> Result<()> {
        if self.config.encoder.name == EncoderName::Remote {
            return Err(trialsim::Error::NotTrainable("remote".into()).into());
        }
        if stages.local {
            self.train_stage(Stage::Local)?;
        }
        if stages.global {
            self.train_stage(Stage::Global)?;
        }
        Ok(())
    }

    fn train_stage(&self, stage: Stage) -> Result<()> {
        let mut encoder = match stage {
            Stage::Local => self.fresh_encoder()?,
            Stage::Global => {
                let local = self.model_dir(Stage::Local);
                if local.join("encoder.json").is_file() {
                    TinyEncoder::load(&local)?
                } else {
                    self.fresh_encoder()?
                }
            }
        };
        let protocols = self.trials()?;
        let held_out = self.test_trial_ids()?;
        let qa_sets: Vec<TrialQaSet> = self
            .qa_sets()?
            .into_iter()
            .filter(|s| !held_out.contains(&s.trial_id))
            .collect();
        let labels: Vec<SimilarityLabel> = read_records(self.path(LABELS), &self.ctx())?;
        let validation = self.queries(&self.path(VALIDATION_QUERIES))?;
        let diseases = disease_index(&protocols);
        let data = TrainingData {
            qa_sets: &qa_sets,
            labels: &labels,
            diseases: &diseases,
            validation: &validation,
        };
        let checkpoints = self.path("checkpoints");
        let mut observer = |log: &EpochLog, enc: &TinyEncoder<f64>| {
            let dir = checkpoints
                .join(log.stage.as_str())
                .join(log.epoch.to_string());
            enc.save(&dir)?;
            write_json(&dir.join("epoch.json"), log).map_err(|e| match e {
                CliError::Core(e) => e,
                other => trialsim::Error::Config(other.to_string()),
            })?;
            Ok(())
        };
        let stages = match stage {
            Stage::Local => Stages::LOCAL,
            Stage::Global => Stages::GLOBAL,
        };
        let report = train(
            &mut encoder,
            &data,
            &self.config.training,
            stages,
            &mut observer,
        )?;
        encoder.save(self.model_dir(stage))?;

        let path = self.path(TRAINING_REPORT);
        let mut all = if path.is_file() {
            read_json(&path)?
        } else {
            json!({})
        };
        all[stage.as_str()] = serde_json::to_value(&report).expect("report serializes");
        write_json(&path, &all)
    }

    pub fn index(&self) -> Result<()> {
        let model = self.load_model()?;
        let sets = self.qa_sets()?;
        let pooling = self.config.encoder.pooling;
        let records: Vec<EmbeddingRecord> = sets
            .iter()
            .map(|s| encode_trial(s, model.backbone(), pooling))
            .collect::<trialsim::Result<_>>()?;
        write_records(self.path(EMBEDDINGS), &records)?;
        let built_from = format!("{}@{}", model.backbone().name(), model.checkpoint());
        write_json(
            &self.path(INDEX_META),
            &json!({
                "built_from": built_from,
                "dim": model.backbone().dim(),
                "trials": records.len(),
                "pooling": pooling,
            }),
        )?;
        log::info!("indexed {} trials with {built_from}", records.len());
        Ok(())
    }

    fn load_index(&self, model: &Model) -> Result<TrialIndex<f64>> {
        let path = self.path(EMBEDDINGS);
        if path.is_file() {
            let records: Vec<EmbeddingRecord> = read_records(&path, &self.ctx())?;
            let built_from = read_json(&self.path(INDEX_META))
                .ok()
                .and_then(|v| v["built_from"].as_str().map(String::from))
                .unwrap_or_else(|| "embeddings".into());
            Ok(TrialIndex::from_records(&records, built_from)?)
        } else {
            Ok(TrialIndex::build(
                &self.qa_sets()?,
                model.backbone(),
                self.config.encoder.pooling,
                model.checkpoint(),
            )?)
        }
    }

    pub fn search(&self, req: &SearchRequest) -> Result<String> {
        let model = self.load_model()?;
        let index = self.load_index(&model)?;
        let candidates = match &req.candidates_file {
            Some(path) => Some(read_id_list(path)?),
            None => None,
        };
        let candidates = candidates.as_deref();
        let pooling = self.config.encoder.pooling;
        let result = match req.mode {
            QueryMode::Full => {
                let id = req
                    .trial
                    .as_deref()
                    .ok_or_else(|| CliError::Usage("--trial is required in full mode".into()))?;
                let set = self
                    .qa_sets()?
                    .into_iter()
                    .find(|s| s.trial_id == id)
                    .ok_or_else(|| trialsim::Error::UnknownTrial(id.into()))?;
                search_full(&set, &index, model.backbone(), pooling, candidates, req.k)?
            }
            QueryMode::Partial => {
                let title = req
                    .title
                    .clone()
                    .ok_or_else(|| CliError::Usage("--title is required in partial mode".into()))?;
                let query = PartialQuery {
                    query_id: "query".into(),
                    title,
                    sections: req.sections.iter().cloned().collect(),
                    eligibility: Vec::new(),
                };
                search_partial(&query, &index, model.backbone(), pooling, candidates, req.k)?
            }
            QueryMode::Patient => {
                let path = req.note_file.as_deref().ok_or_else(|| {
                    CliError::Usage("--note-file is required in patient mode".into())
                })?;
                let note = fs::read_to_string(path).map_err(|e| trialsim::Error::io(path, e))?;
                search_patient(
                    "patient",
                    &note,
                    &index,
                    model.backbone(),
                    candidates,
                    req.k,
                )?
            }
        };
        Ok(result.to_lines())
    }

    fn patient_notes(&self) -> Result<BTreeMap<String, String>> {
        let path = self
            .config
            .required(&self.config.paths.patient_notes, "patient_notes")?;
        let notes: Vec<PatientNote> = read_records(path, &self.ctx())?;
        Ok(notes.into_iter().map(|n| (n.patient_id, n.note)).collect())
    }

    fn query_inputs(
        &self,
        mode: QueryMode,
        queries: &[EvalQuery],
        partial_sections: &[Section],
    ) -> Result<BTreeMap<String, QueryInput>> {
        let wanted: BTreeSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
        let mut inputs = BTreeMap::new();
        match mode {
            QueryMode::Full => {
                for s in self.qa_sets()? {
                    if wanted.contains(s.trial_id.as_str()) {
                        inputs.insert(s.trial_id.clone(), QueryInput::Trial(s));
                    }
                }
            }
            QueryMode::Partial => {
                for p in self.trials()? {
                    if !wanted.contains(p.trial_id.as_str()) {
                        continue;
                    }
                    let sections = partial_sections
                        .iter()
                        .filter(|&&s| !p.is_section_empty(s))
                        .map(|&s| (s, p.section_text(s)))
                        .collect();
                    let query = PartialQuery {
                        query_id: p.trial_id.clone(),
                        title: p.title.clone(),
                        sections,
                        eligibility: Vec::new(),
                    };
                    inputs.insert(p.trial_id, QueryInput::Partial(query));
                }
            }
            QueryMode::Patient => {
                for (id, note) in self.patient_notes()? {
                    if wanted.contains(id.as_str()) {
                        inputs.insert(id, QueryInput::Note(note));
                    }
                }
            }
        }
        Ok(inputs)
    }

    fn lexical_docs(&self) -> Result<Vec<(String, String)>> {
        Ok(self
            .qa_sets()?
            .iter()
            .map(|s| (s.trial_id.clone(), trial_text(s)))
            .collect())
    }

    /// Returns the report name the outputs were written under.
    pub fn evaluate(&self, req: &EvaluateRequest) -> Result<String> {
        let default_queries = match req.mode {
            QueryMode::Patient => PATIENT_QUERIES,
            _ => TEST_QUERIES,
        };
        let queries_path = req
            .queries
            .clone()
            .unwrap_or_else(|| self.path(default_queries));
        let queries = self.queries(&queries_path)?;
        let inputs = self.query_inputs(req.mode, &queries, &req.partial_sections)?;
        let e = &self.config.evaluation;
        let spec = BootstrapSpec {
            sample_size: e.bootstrap_samples,
            iterations: e.bootstrap_iterations,
            seed: e.seed,
        };

        let model;
        let index;
        let dense;
        let lexical_tfidf;
        let lexical_bm25;
        let retriever: &dyn Retriever = match req.retriever {
            RetrieverKind::Secret => {
                model = self.load_model()?;
                index = self.load_index(&model)?;
                dense = DenseRetriever {
                    name: "secret".into(),
                    index: &index,
                    backbone: model.backbone(),
                    pooling: self.config.encoder.pooling,
                };
                &dense
            }
            RetrieverKind::TfIdf => {
                lexical_tfidf = TfIdf::new(self.lexical_docs()?)?;
                &lexical_tfidf
            }
            RetrieverKind::Bm25 => {
                lexical_bm25 = Bm25::new(self.lexical_docs()?)?;
                &lexical_bm25
            }
            RetrieverKind::EmbeddingsFile => {
                let path = req
                    .embeddings
                    .clone()
                    .unwrap_or_else(|| self.path(EMBEDDINGS));
                let records: Vec<EmbeddingRecord> = read_records(&path, &self.ctx())?;
                let queries = records
                    .iter()
                    .filter(|r| r.subject_kind != SubjectKind::Trial)
                    .map(|r| (r.subject_id.clone(), r.vector.clone()))
                    .collect();
                let r = PrecomputedRetriever {
                    index: TrialIndex::from_records(&records, path.display().to_string())?,
                    queries,
                };
                return self.write_evaluation(&r, req, &queries_path, &inputs, spec);
            }
        };
        self.write_evaluation(retriever, req, &queries_path, &inputs, spec)
    }

    fn write_evaluation<R: Retriever + ?Sized>(
        &self,
        retriever: &R,
        req: &EvaluateRequest,
        queries_path: &Path,
        inputs: &BTreeMap<String, QueryInput>,
        spec: BootstrapSpec,
    ) -> Result<String> {
        let queries = self.queries(queries_path)?;
        let ev = evaluate(retriever, &queries, inputs, spec)?;
        let name = req.name.clone().unwrap_or_else(|| match req.mode {
            QueryMode::Full => req.retriever.name().to_string(),
            QueryMode::Partial => format!("{}-partial", req.retriever.name()),
            QueryMode::Patient => format!("{}-patient", req.retriever.name()),
        });
        let dir = self.path("reports");
        write_json(&dir.join(format!("{name}.json")), &ev.report)?;
        write_text(&dir.join(format!("{name}.txt")), &ev.report.to_table())?;
        write_records(dir.join(format!("{name}.per_query.jsonl")), &ev.per_query)?;
        let tsv: String = ev.rankings.iter().map(|r| r.to_lines()).collect();
        write_text(&dir.join(format!("{name}.rankings.tsv")), &tsv)?;
        print!("{}", ev.report.to_table());
        Ok(name)
    }
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let body = fs::read_to_string(path).map_err(|e| trialsim::Error::io(path, e))?;
    Ok(body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Accepts `section=text`, with section one of the non-title, non-eligibility sections.
pub fn parse_section_arg(arg: &str) -> std::result::Result<(Section, String), String> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| format!("expected section=text, got {arg:?}"))?;
    let section = Section::parse(key.trim()).ok_or_else(|| format!("unknown section {key:?}"))?;
    Ok((section, value.to_string()))
}

pub fn parse_section_name(arg: &str) -> std::result::Result<Section, String> {
    Section::parse(arg.trim()).ok_or_else(|| format!("unknown section {arg:?}"))
}
