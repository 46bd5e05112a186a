//! Turns protocols into Q/A sets.
//!
//! Eligibility criteria are summarized by an LLM; the five short sections
//! get one pair each from fixed questions.

mod llm;
mod parse;

pub use llm::{
    CacheEntry, Completer, CompletionCache, HttpCompleter, LlmClient, LlmClientConfig,
    PromptTemplate, API_KEY_ENV, ELIGIBILITY_PROMPT,
};
pub use parse::{format_pairs, parse_llm_output};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Origin, QaPair, Section, TrialProtocol, TrialQaSet};

/// Answers longer than this many words are accepted with a warning.
const ANSWER_WORD_LIMIT: usize = 5;

/// Fixed question asked of each short section.
pub fn predefined_question(section: Section) -> Option<&'static str> {
    match section {
        Section::Title => Some("What is the title of the trial?"),
        Section::Disease => Some("What is the disease treated in this trial?"),
        Section::Intervention => Some("What are the drugs used?"),
        Section::Keywords => Some("What are the keywords?"),
        Section::Outcome => Some("What are the outcome measurements?"),
        Section::EligibilityCriteria => None,
    }
}

/// One pair per non-empty short section, answer = flattened section text.
pub fn predefined_qa(protocol: &TrialProtocol) -> Vec<QaPair> {
    Section::ALL
        .iter()
        .filter_map(|&section| {
            let question = predefined_question(section)?;
            let answer = protocol.section_text(section);
            (!answer.is_empty()).then(|| QaPair {
                question: question.to_string(),
                answer,
                section,
                origin: Origin::Predefined,
                ordinal: 0,
            })
        })
        .collect()
}

/// Converts parsed model output into eligibility pairs in generation order.
pub fn pairs_from_completion(raw: &str) -> Vec<QaPair> {
    parse_llm_output(raw)
        .into_iter()
        .enumerate()
        .map(|(i, (question, answer))| {
            let words = answer.split_whitespace().count();
            if words > ANSWER_WORD_LIMIT {
                log::warn!("answer of {words} words accepted: {answer:?}");
            }
            QaPair {
                question,
                answer,
                section: Section::EligibilityCriteria,
                origin: Origin::Llm,
                ordinal: i as u32,
            }
        })
        .collect()
}

/// Asks the model for eligibility pairs. Over-generation is kept here;
/// [`truncate_qa`] applies the cap.
pub fn generate_eligibility_qa(
    criteria_text: &str,
    client: &LlmClient,
    template: &PromptTemplate,
) -> Result<Vec<QaPair>> {
    if criteria_text.trim().is_empty() {
        return Err(Error::InvalidInput("empty eligibility criteria".into()));
    }
    let completion = client.completion(template, criteria_text)?;
    let pairs = pairs_from_completion(&completion);
    if pairs.is_empty() {
        return Err(Error::ParseFailure);
    }
    Ok(pairs)
}

/// Keeps the first `cap` LLM pairs in generation order; predefined pairs pass through.
pub fn truncate_qa(pairs: Vec<QaPair>, cap: usize) -> Vec<QaPair> {
    let mut llm_seen = 0;
    pairs
        .into_iter()
        .filter(|p| {
            if p.origin != Origin::Llm {
                return true;
            }
            llm_seen += 1;
            llm_seen <= cap
        })
        .collect()
}

/// How eligibility pairs are obtained when assembling a set.
pub enum EligibilitySource<'a> {
    Llm {
        client: &'a LlmClient,
        template: &'a PromptTemplate,
    },
    /// Omit eligibility pairs entirely.
    Skip,
}

pub fn assemble_qa_set(
    protocol: &TrialProtocol,
    source: &EligibilitySource<'_>,
    qa_cap: usize,
) -> Result<TrialQaSet> {
    let mut pairs = predefined_qa(protocol);
    let criteria = protocol.section_text(Section::EligibilityCriteria);
    match source {
        _ if criteria.is_empty() => {}
        EligibilitySource::Llm { client, template } => {
            let generated = generate_eligibility_qa(&criteria, client, template)?;
            if generated.len() > qa_cap {
                log::info!(
                    "{}: {} eligibility pairs truncated to {qa_cap}",
                    protocol.trial_id,
                    generated.len()
                );
            }
            pairs.extend(truncate_qa(generated, qa_cap));
        }
        EligibilitySource::Skip => {
            log::debug!("{}: eligibility pairs skipped", protocol.trial_id);
        }
    }
    Ok(TrialQaSet::new(protocol.trial_id.clone(), pairs))
}

/// Assembles sets for a whole corpus on a pool of `parallelism` workers.
/// Output order follows input order; the first failure (in input order) is returned.
pub fn assemble_corpus(
    protocols: &[TrialProtocol],
    source: &EligibilitySource<'_>,
    qa_cap: usize,
    parallelism: usize,
) -> Result<Vec<TrialQaSet>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrialQaSet>> = pool.install(|| {
        protocols
            .par_iter()
            .map(|p| assemble_qa_set(p, source, qa_cap))
            .collect()
    });
    results.into_iter().collect()
}
