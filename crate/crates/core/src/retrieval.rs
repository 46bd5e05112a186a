//! Exhaustive cosine search over trial embeddings.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed_note, embed_trial, Backbone, TrialPooling};
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, normalized};
use crate::model::{EmbeddingRecord, QaPair, Section, SubjectKind, TrialProtocol, TrialQaSet};
use crate::qa::predefined_qa;
use crate::scalar::Scalar;

/// Immutable set of unit trial vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialIndex<F> {
    dim: usize,
    entries: Vec<(String, Vec<F>)>,
    positions: BTreeMap<String, usize>,
    built_from: String,
}

impl<F: Scalar> TrialIndex<F> {
    /// Encodes every trial with `backbone`; entries keep input order.
    pub fn build<B: Backbone<F> + ?Sized>(
        qa_sets: &[TrialQaSet],
        backbone: &B,
        pooling: TrialPooling,
        checkpoint: &str,
    ) -> Result<Self> {
        let vectors: Vec<Vec<F>> = qa_sets
            .par_iter()
            .map(|s| embed_trial(s, backbone, pooling))
            .collect::<Result<_>>()?;
        let entries = qa_sets
            .iter()
            .map(|s| s.trial_id.clone())
            .zip(vectors)
            .collect();
        Self::from_entries(
            backbone.dim(),
            entries,
            format!("{}@{checkpoint}", backbone.name()),
        )
    }

    /// Normalizes and checks `entries`.
    pub fn from_entries(
        dim: usize,
        entries: Vec<(String, Vec<F>)>,
        built_from: impl Into<String>,
    ) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut positions = BTreeMap::new();
        let mut normed = Vec::with_capacity(entries.len());
        for (i, (id, v)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch(v.len(), dim));
            }
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateTrial(id));
            }
            normed.push((id, normalized(&v)?));
        }
        Ok(TrialIndex {
            dim,
            entries: normed,
            positions,
            built_from: built_from.into(),
        })
    }

    /// Index over the trial records of an embeddings file.
    pub fn from_records(
        records: &[EmbeddingRecord],
        built_from: impl Into<String>,
    ) -> Result<Self> {
        let trials: Vec<&EmbeddingRecord> = records
            .iter()
            .filter(|r| r.subject_kind == SubjectKind::Trial)
            .collect();
        let dim = trials.first().ok_or(Error::EmptyCorpus)?.dim;
        let entries = trials
            .iter()
            .map(|r| {
                (
                    r.subject_id.clone(),
                    r.vector.iter().map(|&x| F::of(x)).collect(),
                )
            })
            .collect();
        Self::from_entries(dim, entries, built_from)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn built_from(&self) -> &str {
        &self.built_from
    }

    pub fn entries(&self) -> &[(String, Vec<F>)] {
        &self.entries
    }

    pub fn get(&self, trial_id: &str) -> Option<&[F]> {
        self.positions
            .get(trial_id)
            .map(|&i| self.entries[i].1.as_slice())
    }

    /// Ranks the candidate set (or the whole index) by cosine to `query`,
    /// dropping `exclude_id` and keeping the top `k`.
    pub fn rank(
        &self,
        query_id: &str,
        query: &[F],
        candidates: Option<&[String]>,
        exclude_id: Option<&str>,
        k: usize,
    ) -> Result<RankedResult> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch(query.len(), self.dim));
        }
        let q = normalized(query)?;
        let pool: Vec<&(String, Vec<F>)> = match candidates {
            None => self.entries.iter().collect(),
            Some(ids) => ids
                .iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(|id| {
                    self.positions
                        .get(id)
                        .map(|&i| &self.entries[i])
                        .ok_or_else(|| Error::UnknownCandidate(id.clone()))
                })
                .collect::<Result<_>>()?,
        };
        let scored = pool
            .into_iter()
            .filter(|(id, _)| Some(id.as_str()) != exclude_id)
            .map(|(id, v)| (id.clone(), dot(&q, v).to_f64_lossy().clamp(-1.0, 1.0)));
        Ok(RankedResult::from_scores(query_id, scored, k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub ranking: Vec<(String, f64)>,
}

impl RankedResult {
    /// Sorts by descending score, ties by ascending id, and keeps `k`.
    pub fn from_scores(
        query_id: &str,
        scores: impl IntoIterator<Item = (String, f64)>,
        k: usize,
    ) -> Self {
        let mut ranking: Vec<(String, f64)> = scores.into_iter().collect();
        ranking.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        ranking.truncate(k);
        RankedResult {
            query_id: query_id.to_string(),
            ranking,
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.ranking.iter().map(|(id, _)| id.as_str()).collect()
    }

    /// `query_id \t rank \t trial_id \t score` lines, ranks from 1.
    pub fn to_lines(&self) -> String {
        self.ranking
            .iter()
            .enumerate()
            .map(|(i, (id, s))| format!("{}\t{}\t{id}\t{s:.6}\n", self.query_id, i + 1))
            .collect()
    }
}

/// Brute-force cosine ranking over raw (unnormalized) vectors.
pub fn rank_by_cosine<F: Scalar>(
    query_id: &str,
    query: &[F],
    entries: &[(String, Vec<F>)],
    k: usize,
) -> Result<RankedResult> {
    let scored = entries
        .iter()
        .map(|(id, v)| Ok((id.clone(), cosine(query, v)?.to_f64_lossy())))
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedResult::from_scores(query_id, scored, k))
}

/// Ranks trials for a full protocol query. The query trial is excluded by id.
pub fn search_full<F: Scalar, B: Backbone<F> + ?Sized>(
    query: &TrialQaSet,
    index: &TrialIndex<F>,
    backbone: &B,
    pooling: TrialPooling,
    candidates: Option<&[String]>,
    k: usize,
) -> Result<RankedResult> {
    let v = embed_trial(query, backbone, pooling)?;
    index.rank(&query.trial_id, &v, candidates, Some(&query.trial_id), k)
}

/// A query built from the title and optionally other sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartialQuery {
    pub query_id: String,
    pub title: String,
    /// Texts for disease, intervention, keywords or outcome.
    pub sections: BTreeMap<Section, String>,
    /// Pre-generated eligibility pairs, if any.
    pub eligibility: Vec<QaPair>,
}

impl PartialQuery {
    pub fn qa_set(&self) -> Result<TrialQaSet> {
        if self.title.trim().is_empty() {
            return Err(Error::InvalidInput("partial query needs a title".into()));
        }
        let mut protocol = TrialProtocol {
            trial_id: self.query_id.clone(),
            title: self.title.clone(),
            ..Default::default()
        };
        for (&section, text) in &self.sections {
            let text = text.trim().to_string();
            match section {
                Section::Disease => protocol.disease = vec![text],
                Section::Intervention => protocol.intervention = vec![text],
                Section::Keywords => protocol.keywords = vec![text],
                Section::Outcome => protocol.outcome = text,
                Section::Title => {
                    return Err(Error::InvalidInput("title is given separately".into()))
                }
                Section::EligibilityCriteria => {
                    return Err(Error::InvalidInput(
                        "eligibility is supplied as Q/A pairs".into(),
                    ))
                }
            }
        }
        let mut pairs: Vec<QaPair> = predefined_qa(&protocol)
            .into_iter()
            .filter(|p| !p.answer.is_empty())
            .collect();
        pairs.extend(self.eligibility.iter().cloned());
        Ok(TrialQaSet::new(self.query_id.clone(), pairs))
    }
}

pub fn search_partial<F: Scalar, B: Backbone<F> + ?Sized>(
    query: &PartialQuery,
    index: &TrialIndex<F>,
    backbone: &B,
    pooling: TrialPooling,
    candidates: Option<&[String]>,
    k: usize,
) -> Result<RankedResult> {
    let set = query.qa_set()?;
    let v = embed_trial(&set, backbone, pooling)?;
    index.rank(&query.query_id, &v, candidates, Some(&query.query_id), k)
}

/// Zero-shot ranking of trials for a patient note.
pub fn search_patient<F: Scalar, B: Backbone<F> + ?Sized>(
    patient_id: &str,
    note: &str,
    index: &TrialIndex<F>,
    backbone: &B,
    candidates: Option<&[String]>,
    k: usize,
) -> Result<RankedResult> {
    let v = embed_note(note, backbone)?;
    index.rank(patient_id, &v, candidates, None, k)
}
