//! Positive mining for Q/A-level training: each pair's positive is the most
//! similar other pair from the same section, under the frozen backbone.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed_qa, Backbone};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::model::{QaPair, Section, TrialQaSet};
use crate::scalar::Scalar;

/// Identifies one Q/A pair in the corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairRef {
    pub trial_id: String,
    pub section: Section,
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry<F> {
    pub trial_id: String,
    pub ordinal: u32,
    pub embedding: Vec<F>,
}

/// All pairs of one section across the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningPool<F> {
    pub section: Section,
    pub entries: Vec<PoolEntry<F>>,
}

impl<F> MiningPool<F> {
    fn pair_ref(&self, i: usize) -> PairRef {
        PairRef {
            trial_id: self.entries[i].trial_id.clone(),
            section: self.section,
            ordinal: self.entries[i].ordinal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalTrainingPair {
    pub anchor: PairRef,
    pub positive: PairRef,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiningOutcome {
    pub pairs: Vec<LocalTrainingPair>,
    /// Anchors skipped because their pool had a single entry.
    pub skipped: usize,
}

/// Embeds every pair with the (frozen) backbone and groups them by section.
pub fn build_pools<F: Scalar, B: Backbone<F> + ?Sized>(
    qa_sets: &[TrialQaSet],
    backbone: &B,
) -> Result<Vec<MiningPool<F>>> {
    let items: Vec<(&str, &QaPair)> = qa_sets
        .iter()
        .flat_map(|s| s.pairs.iter().map(move |p| (s.trial_id.as_str(), p)))
        .collect();
    let embedded: Vec<Vec<F>> = items
        .par_iter()
        .map(|(_, p)| embed_qa(p, backbone))
        .collect::<Result<_>>()?;
    let mut pools: BTreeMap<Section, Vec<PoolEntry<F>>> = BTreeMap::new();
    for ((trial_id, pair), embedding) in items.into_iter().zip(embedded) {
        pools.entry(pair.section).or_default().push(PoolEntry {
            trial_id: trial_id.to_string(),
            ordinal: pair.ordinal,
            embedding,
        });
    }
    Ok(pools
        .into_iter()
        .map(|(section, entries)| MiningPool { section, entries })
        .collect())
}

/// For each anchor, the other pool entry with maximal cosine; ties go to
/// the lexicographically smallest `(trial_id, ordinal)`.
pub fn mine_local_positives<F: Scalar>(pools: &[MiningPool<F>]) -> Result<MiningOutcome> {
    let mut outcome = MiningOutcome::default();
    for pool in pools {
        if pool.entries.len() < 2 {
            log::warn!("{}", Error::PoolTooSmall(pool.section.to_string()));
            outcome.skipped += pool.entries.len();
            continue;
        }
        let best: Vec<usize> = (0..pool.entries.len())
            .into_par_iter()
            .map(|i| best_match(pool, i))
            .collect::<Result<_>>()?;
        outcome.pairs.extend(
            best.into_iter()
                .enumerate()
                .map(|(i, j)| LocalTrainingPair {
                    anchor: pool.pair_ref(i),
                    positive: pool.pair_ref(j),
                }),
        );
    }
    Ok(outcome)
}

fn best_match<F: Scalar>(pool: &MiningPool<F>, anchor: usize) -> Result<usize> {
    let a = &pool.entries[anchor];
    let mut best: Option<(usize, F)> = None;
    for (j, e) in pool.entries.iter().enumerate() {
        if j == anchor {
            continue;
        }
        let s = cosine(&a.embedding, &e.embedding)?;
        let better = match best {
            None => true,
            Some((k, bs)) => match s.partial_cmp(&bs) {
                Some(Ordering::Greater) => true,
                Some(Ordering::Equal) => {
                    let cur = &pool.entries[k];
                    (e.trial_id.as_str(), e.ordinal) < (cur.trial_id.as_str(), cur.ordinal)
                }
                _ => false,
            },
        };
        if better {
            best = Some((j, s));
        }
    }
    Ok(best.expect("pool has at least two entries").0)
}
