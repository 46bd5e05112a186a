//! Planted-cluster corpora for smoke tests and fixtures.
//!
//! Trials in the same cluster draw their content words from a shared
//! cluster vocabulary; every field is padded with words from a pool shared
//! by the whole corpus. Sibling clusters (`2k`, `2k+1`) share a disease
//! string, so same-disease hard negatives exist. Each cluster contributes
//! a training review group and a held-out test group.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ingest::ReviewGroup;
use crate::model::{TrialProtocol, TrialQaSet};
use crate::qa::{format_pairs, pairs_from_completion, predefined_qa, truncate_qa};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub clusters: usize,
    pub per_cluster: usize,
    /// Members of each cluster placed in its training group; the rest form the test group.
    pub train_per_cluster: usize,
    pub cluster_vocab: usize,
    pub noise_vocab: usize,
    /// Shared-pool words added to every field.
    pub noise_per_field: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            clusters: 8,
            per_cluster: 5,
            train_per_cluster: 3,
            cluster_vocab: 12,
            noise_vocab: 60,
            noise_per_field: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCorpus {
    pub protocols: Vec<TrialProtocol>,
    /// Model output for each trial's eligibility text, keyed by trial id.
    pub completions: BTreeMap<String, String>,
    pub cluster_of: BTreeMap<String, usize>,
    pub train_groups: Vec<ReviewGroup>,
    pub test_groups: Vec<ReviewGroup>,
}

const SYLLABLES: [&str; 24] = [
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne", "pa", "qui", "ro", "sa", "te",
    "vi", "wo", "xa", "yo", "zu", "bri", "cla", "dro", "fle",
];

fn word<R: Rng>(rng: &mut R, taken: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n)
            .map(|_| *SYLLABLES.choose(rng).expect("non-empty"))
            .collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [String], n: usize) -> Vec<&'a str> {
    (0..n)
        .map(|_| pool[rng.gen_range(0..pool.len())].as_str())
        .collect()
}

impl PlantedCorpus {
    pub fn generate(config: &PlantedConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut taken = BTreeSet::new();
        let noise: Vec<String> = (0..config.noise_vocab)
            .map(|_| word(&mut rng, &mut taken))
            .collect();
        let vocab: Vec<Vec<String>> = (0..config.clusters)
            .map(|_| {
                (0..config.cluster_vocab)
                    .map(|_| word(&mut rng, &mut taken))
                    .collect()
            })
            .collect();
        let diseases: Vec<String> = (0..config.clusters.div_ceil(2))
            .map(|_| format!("{} syndrome", word(&mut rng, &mut taken)))
            .collect();

        let mut out = PlantedCorpus {
            protocols: Vec::new(),
            completions: BTreeMap::new(),
            cluster_of: BTreeMap::new(),
            train_groups: Vec::new(),
            test_groups: Vec::new(),
        };
        let nf = config.noise_per_field;
        for c in 0..config.clusters {
            let v = &vocab[c];
            let mut members = Vec::new();
            for m in 0..config.per_cluster {
                let id = format!("NCT{:08}", 1000 + c * 100 + m);
                let field = |rng: &mut ChaCha8Rng, own: usize| {
                    let mut words: Vec<&str> = pick(rng, v, own);
                    words.extend(pick(rng, &noise, nf));
                    words.shuffle(rng);
                    words.join(" ")
                };
                let title = format!("{} study", field(&mut rng, 2));
                let intervention = vec![field(&mut rng, 1)];
                let keywords = vec![field(&mut rng, 1), field(&mut rng, 1)];
                let outcome = field(&mut rng, 1);
                let age = rng.gen_range(18..40);
                let pairs = vec![
                    (
                        "What is the age range?".to_string(),
                        format!("{age}-{} years", age + 30),
                    ),
                    (
                        "What condition is required?".to_string(),
                        field(&mut rng, 1),
                    ),
                    ("Is prior therapy allowed?".to_string(), field(&mut rng, 1)),
                    ("What is excluded?".to_string(), field(&mut rng, 1)),
                ];
                let criteria = format!(
                    "Inclusion Criteria: age {age} to {} years; {}. Exclusion Criteria: {}.",
                    age + 30,
                    pairs[1].1,
                    pairs[3].1
                );
                out.completions.insert(id.clone(), format_pairs(&pairs));
                out.protocols.push(TrialProtocol {
                    trial_id: id.clone(),
                    title,
                    disease: vec![diseases[c / 2].clone()],
                    intervention,
                    keywords,
                    outcome,
                    eligibility_criteria: criteria,
                });
                out.cluster_of.insert(id.clone(), c);
                members.push(id);
            }
            let test = members.split_off(config.train_per_cluster.min(members.len()));
            out.train_groups.push(ReviewGroup {
                review_id: format!("R{c:02}-train"),
                member_trial_ids: members,
            });
            if test.len() >= 2 {
                out.test_groups.push(ReviewGroup {
                    review_id: format!("R{c:02}-test"),
                    member_trial_ids: test,
                });
            }
        }
        out
    }

    /// Q/A sets as the pipeline would assemble them from a warm cache.
    pub fn qa_sets(&self, qa_cap: usize) -> Vec<TrialQaSet> {
        self.protocols
            .iter()
            .map(|p| {
                let mut pairs = predefined_qa(p);
                pairs.extend(truncate_qa(
                    pairs_from_completion(&self.completions[&p.trial_id]),
                    qa_cap,
                ));
                TrialQaSet::new(p.trial_id.clone(), pairs)
            })
            .collect()
    }

    pub fn train_ids(&self) -> BTreeSet<String> {
        crate::ingest::member_ids(&self.train_groups)
    }

    pub fn test_ids(&self) -> BTreeSet<String> {
        crate::ingest::member_ids(&self.test_groups)
    }

    /// Writes the completions into a cache for `model_name`.
    pub fn write_cache(&self, cache: &crate::qa::CompletionCache, model_name: &str) -> Result<()> {
        for p in &self.protocols {
            let key = crate::qa::CompletionCache::key(model_name, &p.eligibility_criteria);
            cache.put(
                &key,
                &crate::qa::CacheEntry {
                    model_name: model_name.to_string(),
                    completion: self.completions[&p.trial_id].clone(),
                },
            )?;
        }
        Ok(())
    }
}
