//! Text encoders and the encoding pipeline for Q/A pairs, trials and notes.
//!
//! A [`Backbone`] maps text to a pooled, unnormalized vector; the functions
//! here apply the shared text assembly and L2 normalization so every
//! emitted [`EmbeddingRecord`] has unit norm.

mod remote;
mod tiny;
mod tokenize;

pub use remote::{RemoteEncoder, RemoteEncoderConfig};
pub use tiny::{Forward, Gradients, TinyEncoder, TinyEncoderConfig};
pub use tokenize::{bucket, fnv1a, tokenize};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::normalized;
use crate::model::{EmbeddingRecord, QaPair, SubjectKind, TrialQaSet};
use crate::scalar::Scalar;

/// Separator placed between Q/A texts when a trial is encoded jointly.
pub const PAIR_SEPARATOR: &str = "; ";

/// A text encoder. Implementations must be deterministic and reentrant in
/// inference.
pub trait Backbone<F: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn max_tokens(&self) -> usize;
    fn trainable(&self) -> bool;
    /// Truncated, mean-pooled representation before normalization.
    fn embed_raw(&self, text: &str) -> Result<Vec<F>>;
    /// Inputs cut at `max_tokens` so far.
    fn truncations(&self) -> u64 {
        0
    }

    fn embed(&self, text: &str) -> Result<Vec<F>> {
        let raw = self.embed_raw(text)?;
        if raw.len() != self.dim() {
            return Err(Error::DimensionMismatch(raw.len(), self.dim()));
        }
        normalized(&raw)
            .map_err(|_| Error::TokenizationFailure(format!("zero representation for {text:?}")))
    }
}

/// How a trial's Q/A set becomes one vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialPooling {
    /// Encode the `"; "`-joined concatenation as one sequence.
    #[default]
    Joint,
    /// Average the unit vectors of the individual pairs, then renormalize.
    MeanOfPairs,
}

/// Canonically ordered pair texts joined by [`PAIR_SEPARATOR`].
pub fn trial_text(qa_set: &TrialQaSet) -> String {
    let canonical = TrialQaSet::new(qa_set.trial_id.clone(), qa_set.pairs.clone());
    canonical.texts().join(PAIR_SEPARATOR)
}

pub fn embed_qa<F: Scalar, B: Backbone<F> + ?Sized>(pair: &QaPair, backbone: &B) -> Result<Vec<F>> {
    backbone.embed(&pair.text())
}

pub fn embed_trial<F: Scalar, B: Backbone<F> + ?Sized>(
    qa_set: &TrialQaSet,
    backbone: &B,
    pooling: TrialPooling,
) -> Result<Vec<F>> {
    if qa_set.pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "trial {} has no Q/A pairs",
            qa_set.trial_id
        )));
    }
    match pooling {
        TrialPooling::Joint => backbone.embed(&trial_text(qa_set)),
        TrialPooling::MeanOfPairs => {
            let canonical = TrialQaSet::new(qa_set.trial_id.clone(), qa_set.pairs.clone());
            let mut acc = vec![F::zero(); backbone.dim()];
            for pair in &canonical.pairs {
                for (a, v) in acc.iter_mut().zip(embed_qa(pair, backbone)?) {
                    *a += v;
                }
            }
            normalized(&acc)
        }
    }
}

pub fn embed_note<F: Scalar, B: Backbone<F> + ?Sized>(note: &str, backbone: &B) -> Result<Vec<F>> {
    if note.trim().is_empty() {
        return Err(Error::InvalidInput("empty note".into()));
    }
    backbone.embed(note)
}

/// Builds a stored record, renormalizing in f64 so the unit-norm invariant
/// holds regardless of the backbone's scalar type.
pub fn to_record<F: Scalar>(
    subject_id: &str,
    subject_kind: SubjectKind,
    vector: &[F],
) -> Result<EmbeddingRecord> {
    let wide: Vec<f64> = vector.iter().map(|x| x.to_f64_lossy()).collect();
    let vector = normalized(&wide)?;
    Ok(EmbeddingRecord {
        subject_id: subject_id.to_string(),
        subject_kind,
        dim: vector.len(),
        vector,
    })
}

/// Record id of a Q/A pair: `trial_id/section/ordinal`.
pub fn qa_subject_id(trial_id: &str, pair: &QaPair) -> String {
    format!("{trial_id}/{}/{}", pair.section, pair.ordinal)
}

pub fn encode_qa<F: Scalar, B: Backbone<F> + ?Sized>(
    trial_id: &str,
    pair: &QaPair,
    backbone: &B,
) -> Result<EmbeddingRecord> {
    to_record(
        &qa_subject_id(trial_id, pair),
        SubjectKind::QaPair,
        &embed_qa(pair, backbone)?,
    )
}

pub fn encode_trial<F: Scalar, B: Backbone<F> + ?Sized>(
    qa_set: &TrialQaSet,
    backbone: &B,
    pooling: TrialPooling,
) -> Result<EmbeddingRecord> {
    to_record(
        &qa_set.trial_id,
        SubjectKind::Trial,
        &embed_trial(qa_set, backbone, pooling)?,
    )
}

pub fn encode_text<F: Scalar, B: Backbone<F> + ?Sized>(
    patient_id: &str,
    note: &str,
    backbone: &B,
) -> Result<EmbeddingRecord> {
    to_record(
        patient_id,
        SubjectKind::Patient,
        &embed_note(note, backbone)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Origin, Section, NORM_TOLERANCE};

    fn encoder() -> TinyEncoder<f64> {
        TinyEncoder::new(TinyEncoderConfig {
            vocab_size: 512,
            dim: 32,
            max_tokens: 128,
            seed: 3,
        })
        .unwrap()
    }

    fn pair(section: Section, ordinal: u32, q: &str, a: &str) -> QaPair {
        QaPair {
            question: q.into(),
            answer: a.into(),
            section,
            origin: if section == Section::EligibilityCriteria {
                Origin::Llm
            } else {
                Origin::Predefined
            },
            ordinal,
        }
    }

    fn set() -> TrialQaSet {
        TrialQaSet::new(
            "NCT1",
            vec![
                pair(
                    Section::Title,
                    0,
                    "What is the title of the trial?",
                    "Asthma study",
                ),
                pair(
                    Section::EligibilityCriteria,
                    0,
                    "What is the age range?",
                    "6-12 years",
                ),
                pair(Section::EligibilityCriteria, 1, "What sex?", "Female"),
                pair(Section::EligibilityCriteria, 2, "Smokers allowed?", "No"),
            ],
        )
    }

    #[test]
    fn qa_encoding_is_deterministic_and_unit() {
        let enc = encoder();
        let p = pair(Section::Title, 0, "What is the title of the trial?", "X");
        let a = encode_qa("T1", &p, &enc).unwrap();
        let b = encode_qa("T1", &p, &enc).unwrap();
        assert_eq!(a.vector, b.vector);
        a.validate().unwrap();
        let other = encode_qa("T2", &p, &enc).unwrap();
        assert_eq!(a.vector, other.vector);
    }

    #[test]
    fn single_pair_trial_equals_pair() {
        let enc = encoder();
        let p = pair(
            Section::Title,
            0,
            "What is the title of the trial?",
            "Asthma",
        );
        let set = TrialQaSet::new("T", vec![p.clone()]);
        assert_eq!(
            encode_trial(&set, &enc, TrialPooling::Joint)
                .unwrap()
                .vector,
            encode_qa("T", &p, &enc).unwrap().vector
        );
        assert_eq!(
            encode_trial(&set, &enc, TrialPooling::MeanOfPairs)
                .unwrap()
                .vector,
            encode_qa("T", &p, &enc).unwrap().vector
        );
    }

    #[test]
    fn permuted_pairs_encode_identically() {
        let enc = encoder();
        let s = set();
        let mut shuffled = s.clone();
        shuffled.pairs.reverse();
        for pooling in [TrialPooling::Joint, TrialPooling::MeanOfPairs] {
            let a = encode_trial(&s, &enc, pooling).unwrap();
            let b = encode_trial(&shuffled, &enc, pooling).unwrap();
            assert_eq!(a.vector, b.vector);
            assert!((crate::linalg::norm(&a.vector) - 1.0).abs() < NORM_TOLERANCE);
        }
    }

    #[test]
    fn note_equal_to_trial_text_matches_trial() {
        let enc = encoder();
        let s = set();
        let note = trial_text(&s);
        assert_eq!(
            encode_text("p1", &note, &enc).unwrap().vector,
            encode_trial(&s, &enc, TrialPooling::Joint).unwrap().vector
        );
    }

    #[test]
    fn blank_notes_are_invalid() {
        let enc = encoder();
        assert!(matches!(
            encode_text("p", "", &enc),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            encode_text("p", "  \n\t", &enc),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn f32_backbone_records_are_unit() {
        let enc = TinyEncoder::<f32>::new(TinyEncoderConfig::default()).unwrap();
        let r = encode_trial(&set(), &enc, TrialPooling::Joint).unwrap();
        r.validate().unwrap();
        assert_eq!(r.dim, 64);
    }
}
