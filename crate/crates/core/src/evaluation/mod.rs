//! Ranking metrics, bootstrap reports, lexical baselines and the
//! evaluation driver.

mod baselines;
mod bootstrap;
mod metrics;

pub use baselines::{Bm25, TfIdf, BM25_B, BM25_K1};
pub use bootstrap::{
    bootstrap_report, BootstrapSpec, MetricReport, MetricSummary, DEFAULT_ITERATIONS,
    DEFAULT_SAMPLE_SIZE,
};
pub use metrics::{
    average_precision, mean_average_precision, ndcg_at_k, precision_at_k, recall_at_k, Metric,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed_note, embed_trial, trial_text, Backbone, TrialPooling};
use crate::error::{Error, Result};
use crate::model::{EvalQuery, Record, RecordContext, TrialQaSet};
use crate::retrieval::{PartialQuery, RankedResult, TrialIndex};
use crate::scalar::Scalar;

/// What a query looks like to a retriever.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryInput {
    Trial(TrialQaSet),
    Partial(PartialQuery),
    Note(String),
}

impl QueryInput {
    /// Plain text for lexical retrievers.
    pub fn text(&self) -> Result<String> {
        match self {
            QueryInput::Trial(set) => Ok(trial_text(set)),
            QueryInput::Partial(p) => Ok(trial_text(&p.qa_set()?)),
            QueryInput::Note(note) => Ok(note.clone()),
        }
    }
}

pub trait Retriever: Sync {
    fn name(&self) -> &str;
    /// Ranks exactly `candidates` for the query.
    fn rank(
        &self,
        query_id: &str,
        input: &QueryInput,
        candidates: &[String],
    ) -> Result<RankedResult>;
}

/// Cosine ranking over a trial index with a live backbone.
pub struct DenseRetriever<'a, F, B: ?Sized> {
    pub name: String,
    pub index: &'a TrialIndex<F>,
    pub backbone: &'a B,
    pub pooling: TrialPooling,
}

impl<F: Scalar, B: Backbone<F> + ?Sized> Retriever for DenseRetriever<'_, F, B> {
    fn name(&self) -> &str {
        &self.name
    }

    fn rank(
        &self,
        query_id: &str,
        input: &QueryInput,
        candidates: &[String],
    ) -> Result<RankedResult> {
        let v = match input {
            QueryInput::Trial(set) => embed_trial(set, self.backbone, self.pooling)?,
            QueryInput::Partial(p) => embed_trial(&p.qa_set()?, self.backbone, self.pooling)?,
            QueryInput::Note(note) => embed_note(note, self.backbone)?,
        };
        self.index.rank(
            query_id,
            &v,
            Some(candidates),
            Some(query_id),
            candidates.len().max(1),
        )
    }
}

/// Cosine ranking with query vectors read from an embeddings file.
pub struct PrecomputedRetriever {
    pub index: TrialIndex<f64>,
    pub queries: BTreeMap<String, Vec<f64>>,
}

impl Retriever for PrecomputedRetriever {
    fn name(&self) -> &str {
        "embeddings-file"
    }

    fn rank(&self, query_id: &str, _: &QueryInput, candidates: &[String]) -> Result<RankedResult> {
        let v = self
            .queries
            .get(query_id)
            .map(Vec::as_slice)
            .or_else(|| self.index.get(query_id))
            .ok_or_else(|| Error::UnknownTrial(query_id.to_string()))?;
        self.index.rank(
            query_id,
            v,
            Some(candidates),
            Some(query_id),
            candidates.len().max(1),
        )
    }
}

impl Retriever for TfIdf {
    fn name(&self) -> &str {
        "tfidf"
    }

    fn rank(
        &self,
        query_id: &str,
        input: &QueryInput,
        candidates: &[String],
    ) -> Result<RankedResult> {
        TfIdf::rank(
            self,
            query_id,
            &input.text()?,
            Some(candidates),
            candidates.len().max(1),
        )
    }
}

impl Retriever for Bm25 {
    fn name(&self) -> &str {
        "bm25"
    }

    fn rank(
        &self,
        query_id: &str,
        input: &QueryInput,
        candidates: &[String],
    ) -> Result<RankedResult> {
        Bm25::rank(
            self,
            query_id,
            &input.text()?,
            Some(candidates),
            candidates.len().max(1),
        )
    }
}

/// One query's eight metric values, keyed by metric name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScores {
    pub query_id: String,
    pub scores: BTreeMap<String, f64>,
}

impl Record for QueryScores {
    fn check(&self, _: &RecordContext) -> Result<()> {
        if self.scores.values().all(|v| (0.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(Error::SchemaViolation(format!(
                "query {} has a score outside [0, 1]",
                self.query_id
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub per_query: Vec<QueryScores>,
    pub rankings: Vec<RankedResult>,
}

/// All eight metrics of one ranking.
pub fn score_ranking(ranking: &RankedResult, query: &EvalQuery) -> Result<BTreeMap<Metric, f64>> {
    let relevant = query.relevant_ids();
    let ids = ranking.ids();
    Metric::ALL
        .iter()
        .map(|&m| Ok((m, m.score::<f64, _>(&ids, &relevant)?)))
        .collect()
}

/// Ranks each query's candidates, scores all metrics and bootstraps.
pub fn evaluate<R: Retriever + ?Sized>(
    retriever: &R,
    queries: &[EvalQuery],
    inputs: &BTreeMap<String, QueryInput>,
    bootstrap: BootstrapSpec,
) -> Result<Evaluation> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("no evaluation queries".into()));
    }
    let results: Vec<(RankedResult, BTreeMap<Metric, f64>)> = queries
        .par_iter()
        .map(|q| {
            let input = inputs
                .get(&q.query_id)
                .ok_or_else(|| Error::UnknownTrial(q.query_id.clone()))?;
            let ranking = retriever.rank(&q.query_id, input, &q.candidate_ids())?;
            let scores = score_ranking(&ranking, q)?;
            Ok((ranking, scores))
        })
        .collect::<Result<_>>()?;

    let mut columns: BTreeMap<Metric, Vec<f64>> = BTreeMap::new();
    let mut per_query = Vec::with_capacity(results.len());
    let mut rankings = Vec::with_capacity(results.len());
    for (q, (ranking, scores)) in queries.iter().zip(results) {
        for (&m, &v) in &scores {
            columns.entry(m).or_default().push(v);
        }
        per_query.push(QueryScores {
            query_id: q.query_id.clone(),
            scores: scores
                .iter()
                .map(|(m, v)| (m.name().to_string(), *v))
                .collect(),
        });
        rankings.push(ranking);
    }
    let report = bootstrap_report(retriever.name(), &columns, bootstrap)?;
    Ok(Evaluation {
        report,
        per_query,
        rankings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Candidate, QueryKind};

    struct Oracle {
        reversed: bool,
        queries: Vec<EvalQuery>,
    }

    impl Retriever for Oracle {
        fn name(&self) -> &str {
            "oracle"
        }

        fn rank(
            &self,
            query_id: &str,
            _: &QueryInput,
            candidates: &[String],
        ) -> Result<RankedResult> {
            let q = self
                .queries
                .iter()
                .find(|q| q.query_id == query_id)
                .unwrap();
            let rel = q.relevant_ids();
            let scored = candidates.iter().map(|c| {
                let hit = rel.contains(c) != self.reversed;
                (c.clone(), if hit { 1.0 } else { 0.0 })
            });
            Ok(RankedResult::from_scores(
                query_id,
                scored,
                candidates.len(),
            ))
        }
    }

    fn queries() -> Vec<EvalQuery> {
        (0..5)
            .map(|i| EvalQuery {
                query_id: format!("Q{i}"),
                query_kind: QueryKind::FullTrial,
                candidates: (0..10)
                    .map(|j| Candidate {
                        trial_id: format!("C{i}_{j}"),
                        relevant: j <= i,
                    })
                    .collect(),
            })
            .collect()
    }

    fn inputs(qs: &[EvalQuery]) -> BTreeMap<String, QueryInput> {
        qs.iter()
            .map(|q| (q.query_id.clone(), QueryInput::Note("unused".into())))
            .collect()
    }

    #[test]
    fn perfect_rankings_score_one() {
        let qs = queries();
        let r = Oracle {
            reversed: false,
            queries: qs.clone(),
        };
        let ev = evaluate(&r, &qs, &inputs(&qs), BootstrapSpec::with_seed(0)).unwrap();
        for name in ["precision@1", "recall@5", "nDCG@5", "MAP"] {
            let m = ev.report.get(name).unwrap();
            assert_eq!(m.mean, 1.0, "{name}");
            assert_eq!(m.std, 0.0);
        }
        assert_eq!(ev.per_query.len(), 5);
    }

    #[test]
    fn reversed_rankings_match_oracle() {
        let qs = queries();
        let r = Oracle {
            reversed: true,
            queries: qs.clone(),
        };
        let ev = evaluate(&r, &qs, &inputs(&qs), BootstrapSpec::with_seed(0)).unwrap();
        // relevant items occupy the last i+1 of 10 positions
        for (i, s) in ev.per_query.iter().enumerate() {
            let n_rel = i + 1;
            let in_top5 = n_rel.saturating_sub(5);
            assert_eq!(s.scores["recall@5"], in_top5 as f64 / n_rel as f64);
        }
    }

    #[test]
    fn missing_query_input_is_an_error() {
        let qs = queries();
        let r = Oracle {
            reversed: false,
            queries: qs.clone(),
        };
        assert!(matches!(
            evaluate(&r, &qs, &BTreeMap::new(), BootstrapSpec::with_seed(0)),
            Err(Error::UnknownTrial(_))
        ));
    }
}
