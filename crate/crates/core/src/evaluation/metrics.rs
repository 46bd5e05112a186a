//! Binary-relevance ranking metrics.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn hits_in_top<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> usize {
    ranking
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_ref()))
        .count()
}

/// `|relevant ∩ top-k| / k`.
pub fn precision_at_k<F: Scalar, S: AsRef<str>>(
    ranking: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> F {
    assert!(k >= 1, "k must be at least 1");
    F::of_usize(hits_in_top(ranking, relevant, k)) / F::of_usize(k)
}

/// `|relevant ∩ top-k| / |relevant|`.
pub fn recall_at_k<F: Scalar, S: AsRef<str>>(
    ranking: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<F> {
    if relevant.is_empty() {
        return Err(Error::NoRelevant);
    }
    Ok(F::of_usize(hits_in_top(ranking, relevant, k)) / F::of_usize(relevant.len()))
}

/// Binary-gain nDCG with a `log2(rank + 1)` discount; the ideal ordering
/// fills `min(k, |relevant|)` positions.
pub fn ndcg_at_k<F: Scalar, S: AsRef<str>>(
    ranking: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<F> {
    if relevant.is_empty() {
        return Err(Error::NoRelevant);
    }
    let discount = |rank: usize| F::one() / F::of_usize(rank + 1).log2();
    let dcg: F = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id.as_ref()))
        .fold(F::zero(), |acc, (i, _)| acc + discount(i + 1));
    let ideal: F = (1..=k.min(relevant.len())).fold(F::zero(), |acc, r| acc + discount(r));
    Ok(dcg / ideal)
}

/// Mean of precision@r over the ranks r holding a relevant item, divided by
/// `|relevant|`; relevant items never retrieved contribute zero.
pub fn average_precision<F: Scalar, S: AsRef<str>>(
    ranking: &[S],
    relevant: &BTreeSet<String>,
) -> Result<F> {
    if relevant.is_empty() {
        return Err(Error::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = F::zero();
    for (i, id) in ranking.iter().enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            sum += F::of_usize(hits) / F::of_usize(i + 1);
        }
    }
    Ok(sum / F::of_usize(relevant.len()))
}

pub fn mean_average_precision<F: Scalar, S: AsRef<str>>(
    rankings: &[Vec<S>],
    relevants: &[BTreeSet<String>],
) -> Result<F> {
    if rankings.len() != relevants.len() {
        return Err(Error::InvalidInput(format!(
            "{} rankings but {} relevance sets",
            rankings.len(),
            relevants.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::NoRelevant);
    }
    let mut total = F::zero();
    for (r, rel) in rankings.iter().zip(relevants) {
        total += average_precision::<F, S>(r, rel)?;
    }
    Ok(total / F::of_usize(rankings.len()))
}

/// The eight reported metrics, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    PrecisionAt1,
    RecallAt1,
    PrecisionAt2,
    RecallAt2,
    PrecisionAt5,
    RecallAt5,
    NdcgAt5,
    Map,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::PrecisionAt1,
        Metric::RecallAt1,
        Metric::PrecisionAt2,
        Metric::RecallAt2,
        Metric::PrecisionAt5,
        Metric::RecallAt5,
        Metric::NdcgAt5,
        Metric::Map,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::PrecisionAt1 => "precision@1",
            Metric::RecallAt1 => "recall@1",
            Metric::PrecisionAt2 => "precision@2",
            Metric::RecallAt2 => "recall@2",
            Metric::PrecisionAt5 => "precision@5",
            Metric::RecallAt5 => "recall@5",
            Metric::NdcgAt5 => "nDCG@5",
            Metric::Map => "MAP",
        }
    }

    /// Per-query value; MAP's per-query value is average precision.
    pub fn score<F: Scalar, S: AsRef<str>>(
        self,
        ranking: &[S],
        relevant: &BTreeSet<String>,
    ) -> Result<F> {
        match self {
            Metric::PrecisionAt1 => Ok(precision_at_k(ranking, relevant, 1)),
            Metric::PrecisionAt2 => Ok(precision_at_k(ranking, relevant, 2)),
            Metric::PrecisionAt5 => Ok(precision_at_k(ranking, relevant, 5)),
            Metric::RecallAt1 => recall_at_k(ranking, relevant, 1),
            Metric::RecallAt2 => recall_at_k(ranking, relevant, 2),
            Metric::RecallAt5 => recall_at_k(ranking, relevant, 5),
            Metric::NdcgAt5 => ndcg_at_k(ranking, relevant, 5),
            Metric::Map => average_precision(ranking, relevant),
        }
    }
}
