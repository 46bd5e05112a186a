//! Positive and hard-negative construction for trial-level training.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Section, SimilarityLabel, TrialQaSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveSpec {
    /// The anchor itself with one pair of `section` removed.
    DropOneQa { section: Section, ordinal: u32 },
    /// A trial labeled similar to the anchor.
    LabeledSimilar { trial_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialExample {
    pub anchor_id: String,
    pub positive_spec: PositiveSpec,
    pub hard_negative_id: Option<String>,
}

impl TrialExample {
    pub fn is_labeled(&self) -> bool {
        matches!(self.positive_spec, PositiveSpec::LabeledSimilar { .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExampleSet {
    pub examples: Vec<TrialExample>,
    /// Unlabeled anchors with no section holding two or more pairs.
    pub skipped: usize,
}

/// Relevant partners per trial, symmetric over the label list.
pub fn relevant_map(labels: &[SimilarityLabel]) -> BTreeMap<String, BTreeSet<String>> {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for l in labels.iter().filter(|l| l.relevant) {
        map.entry(l.query_trial_id.clone())
            .or_default()
            .insert(l.candidate_trial_id.clone());
        map.entry(l.candidate_trial_id.clone())
            .or_default()
            .insert(l.query_trial_id.clone());
    }
    map
}

/// Builds one example per anchor trial.
///
/// Labeled anchors (with at least one relevant partner present in the corpus)
/// take a uniformly drawn partner as positive; the rest drop one uniformly
/// drawn pair from the sections holding two or more pairs. Each anchor gets
/// one hard negative drawn uniformly from trials sharing a disease string
/// (case-insensitive) that are not known positives, or none.
pub fn build_trial_examples<R: Rng>(
    qa_sets: &[TrialQaSet],
    labels: &[SimilarityLabel],
    diseases: &BTreeMap<String, BTreeSet<String>>,
    rng: &mut R,
) -> Result<ExampleSet> {
    if qa_sets.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let ids: BTreeSet<&str> = qa_sets.iter().map(|s| s.trial_id.as_str()).collect();
    let relevant = relevant_map(labels);
    let mut by_disease: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for s in qa_sets {
        if let Some(ds) = diseases.get(&s.trial_id) {
            for d in ds {
                by_disease
                    .entry(d.as_str())
                    .or_default()
                    .push(s.trial_id.as_str());
            }
        }
    }

    let mut out = ExampleSet::default();
    let empty = BTreeSet::new();
    for set in qa_sets {
        let anchor = set.trial_id.as_str();
        let partners: Vec<&str> = relevant
            .get(anchor)
            .unwrap_or(&empty)
            .iter()
            .map(String::as_str)
            .filter(|id| ids.contains(id) && *id != anchor)
            .collect();

        let positive_spec = if !partners.is_empty() {
            PositiveSpec::LabeledSimilar {
                trial_id: partners[rng.gen_range(0..partners.len())].to_string(),
            }
        } else {
            let eligible: Vec<_> = set
                .pairs
                .iter()
                .filter(|p| set.section_pairs(p.section).nth(1).is_some())
                .collect();
            if eligible.is_empty() {
                log::debug!("{}", Error::NoEligibleSection(anchor.to_string()));
                out.skipped += 1;
                continue;
            }
            let dropped = eligible[rng.gen_range(0..eligible.len())];
            PositiveSpec::DropOneQa {
                section: dropped.section,
                ordinal: dropped.ordinal,
            }
        };

        let known = relevant.get(anchor).unwrap_or(&empty);
        let mut negatives: BTreeSet<&str> = BTreeSet::new();
        for d in diseases.get(anchor).into_iter().flatten() {
            for &other in by_disease.get(d.as_str()).into_iter().flatten() {
                if other != anchor && !known.contains(other) {
                    negatives.insert(other);
                }
            }
        }
        let negatives: Vec<&str> = negatives.into_iter().collect();
        let hard_negative_id = negatives.choose(rng).map(|s| s.to_string());

        out.examples.push(TrialExample {
            anchor_id: anchor.to_string(),
            positive_spec,
            hard_negative_id,
        });
    }
    Ok(out)
}

/// Materializes the positive Q/A set of an example.
pub fn positive_set<'a>(
    example: &TrialExample,
    sets: &'a BTreeMap<String, TrialQaSet>,
) -> Result<std::borrow::Cow<'a, TrialQaSet>> {
    let anchor = sets
        .get(&example.anchor_id)
        .ok_or_else(|| Error::UnknownTrial(example.anchor_id.clone()))?;
    match &example.positive_spec {
        PositiveSpec::DropOneQa { section, ordinal } => {
            let index = anchor
                .pairs
                .iter()
                .position(|p| p.section == *section && p.ordinal == *ordinal)
                .ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "{} has no {section} pair {ordinal}",
                        anchor.trial_id
                    ))
                })?;
            Ok(std::borrow::Cow::Owned(anchor.without_pair(index)))
        }
        PositiveSpec::LabeledSimilar { trial_id } => sets
            .get(trial_id)
            .map(std::borrow::Cow::Borrowed)
            .ok_or_else(|| Error::UnknownTrial(trial_id.clone())),
    }
}

/// Lower-cased disease strings per trial.
pub fn disease_index<'a>(
    protocols: impl IntoIterator<Item = &'a crate::model::TrialProtocol>,
) -> BTreeMap<String, BTreeSet<String>> {
    protocols
        .into_iter()
        .map(|p| (p.trial_id.clone(), p.disease_keys()))
        .collect()
}

/// Orders examples into batch order: each slot takes the next labeled
/// example with probability `labeled_fraction` (when any remain), otherwise
/// the next unlabeled one. Both queues are shuffled first.
pub fn mix_examples<R: Rng>(
    examples: Vec<TrialExample>,
    labeled_fraction: f64,
    rng: &mut R,
) -> Vec<TrialExample> {
    let (mut labeled, mut unlabeled): (Vec<_>, Vec<_>) =
        examples.into_iter().partition(TrialExample::is_labeled);
    labeled.shuffle(rng);
    unlabeled.shuffle(rng);
    let mut labeled = labeled.into_iter().peekable();
    let mut unlabeled = unlabeled.into_iter().peekable();
    let mut out = Vec::new();
    loop {
        let take_labeled = match (labeled.peek(), unlabeled.peek()) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(_), Some(_)) => rng.gen_bool(labeled_fraction.clamp(0.0, 1.0)),
        };
        let next = if take_labeled {
            labeled.next()
        } else {
            unlabeled.next()
        };
        out.extend(next);
    }
    out
}
