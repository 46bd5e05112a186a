//! `trialsim`: ingest protocols, generate Q/A summaries, fine-tune the
//! encoder, index, search and evaluate.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use trialsim::model::Section;
use trialsim::training::Stages;

use config::PipelineConfig;
use pipeline::{
    parse_section_arg, parse_section_name, EvaluateRequest, Pipeline, QueryMode, RetrieverKind,
    SearchRequest,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] trialsim::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "Config",
            CliError::Usage(_) => "Usage",
            CliError::Core(e) => e.kind(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Core(trialsim::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "trialsim", version, about = "Clinical-trial similarity search")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "trialsim.toml")]
    config: PathBuf,
    /// Overrides `paths.workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// One seed for splitting, initialization, training and bootstrap.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun stages whose outputs already exist (run-all only).
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Partial,
    Patient,
}

impl From<ModeArg> for QueryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => QueryMode::Full,
            ModeArg::Partial => QueryMode::Partial,
            ModeArg::Patient => QueryMode::Patient,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrieverArg {
    Secret,
    Tfidf,
    Bm25,
    EmbeddingsFile,
}

impl From<RetrieverArg> for RetrieverKind {
    fn from(r: RetrieverArg) -> Self {
        match r {
            RetrieverArg::Secret => RetrieverKind::Secret,
            RetrieverArg::Tfidf => RetrieverKind::TfIdf,
            RetrieverArg::Bm25 => RetrieverKind::Bm25,
            RetrieverArg::EmbeddingsFile => RetrieverKind::EmbeddingsFile,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse the corpus into trials.jsonl.
    Ingest,
    /// Split review groups and write labels and evaluation queries.
    BuildEval,
    /// Assemble Q/A sets, calling the LLM for eligibility criteria.
    GenerateQa {
        /// Cache-only: a missing completion is an error.
        #[arg(long)]
        offline: bool,
        /// Omit eligibility pairs.
        #[arg(long)]
        skip_llm: bool,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    TrainLocal,
    TrainGlobal,
    TrainAll,
    /// Encode every trial into embeddings.jsonl.
    Index,
    /// Rank trials for one query and print TSV lines.
    Search {
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        #[arg(long)]
        trial: Option<String>,
        #[arg(long)]
        title: Option<String>,
        /// `section=text`, repeatable.
        #[arg(long = "sections", value_parser = parse_section_arg)]
        sections: Vec<(Section, String)>,
        #[arg(long)]
        note_file: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// One trial id per line.
        #[arg(long)]
        candidates_file: Option<PathBuf>,
    },
    /// Score a retriever on evaluation queries and write reports/.
    Evaluate {
        #[arg(long, value_enum, default_value = "secret")]
        retriever: RetrieverArg,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        /// Query file; defaults to the test (or patient) queries.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Sections added to the title in partial mode.
        #[arg(long, value_delimiter = ',', value_parser = parse_section_name)]
        partial_sections: Vec<Section>,
        /// Report file stem.
        #[arg(long)]
        name: Option<String>,
    },
    /// Every stage in order; finished stages are skipped unless --force.
    RunAll {
        #[arg(long)]
        skip_llm: bool,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = if cli.config.exists() {
        PipelineConfig::load(&cli.config)?
    } else {
        return Err(CliError::Config(format!(
            "config file {} not found",
            cli.config.display()
        )));
    };
    if let Some(dir) = &cli.workdir {
        config.paths.workdir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        config.apply_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

fn run_all(p: &Pipeline, force: bool, skip_llm: bool) -> Result<(), CliError> {
    let done = |name: &str| !force && p.path(name).exists();
    if !done(pipeline::TRIALS) {
        p.ingest()?;
    }
    if !done(pipeline::SPLIT) {
        p.build_eval()?;
    }
    if !done(pipeline::QA_SETS) {
        p.generate_qa(skip_llm)?;
    }
    if !done("models/local/encoder.json") {
        p.train(Stages::LOCAL)?;
    }
    if !done("models/global/encoder.json") {
        p.train(Stages::GLOBAL)?;
    }
    if !done(pipeline::INDEX_META) {
        p.index()?;
    }
    for kind in [
        RetrieverKind::Secret,
        RetrieverKind::TfIdf,
        RetrieverKind::Bm25,
    ] {
        if done(&format!("reports/{}.json", kind.name())) {
            continue;
        }
        p.evaluate(&EvaluateRequest {
            retriever: kind,
            mode: QueryMode::Full,
            queries: None,
            embeddings: None,
            partial_sections: Vec::new(),
            name: None,
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = load_config(&cli)?;
    if let Command::GenerateQa {
        offline, cache_dir, ..
    } = &cli.command
    {
        config.llm.offline |= *offline;
        if let Some(dir) = cache_dir {
            config.llm.cache_dir = dir.clone();
        }
    }
    let p = Pipeline::new(config);
    match cli.command {
        Command::Ingest => p.ingest(),
        Command::BuildEval => p.build_eval(),
        Command::GenerateQa { skip_llm, .. } => p.generate_qa(skip_llm),
        Command::TrainLocal => p.train(Stages::LOCAL),
        Command::TrainGlobal => p.train(Stages::GLOBAL),
        Command::TrainAll => p.train(Stages::ALL),
        Command::Index => p.index(),
        Command::Search {
            mode,
            trial,
            title,
            sections,
            note_file,
            k,
            candidates_file,
        } => {
            let out = p.search(&SearchRequest {
                mode: mode.into(),
                trial,
                title,
                sections,
                note_file,
                k,
                candidates_file,
            })?;
            print!("{out}");
            Ok(())
        }
        Command::Evaluate {
            retriever,
            mode,
            queries,
            embeddings,
            partial_sections,
            name,
        } => p
            .evaluate(&EvaluateRequest {
                retriever: retriever.into(),
                mode: mode.into(),
                queries,
                embeddings,
                partial_sections,
                name,
            })
            .map(|_| ()),
        Command::RunAll { skip_llm } => run_all(&p, cli.force, skip_llm),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
