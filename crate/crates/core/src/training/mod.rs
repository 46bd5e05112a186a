//! Two-stage contrastive fine-tuning of the tiny encoder.
//!
//! Stage one trains on Q/A pairs against positives mined once with the
//! initial weights. Stage two trains on whole trials, pairing each anchor
//! with a drop-one or labeled positive and an optional same-disease hard
//! negative. After each epoch the model is scored on validation queries
//! and the best epoch is kept.

mod examples;
mod loss;
mod mining;
mod optim;

pub use examples::{
    build_trial_examples, disease_index, mix_examples, positive_set, relevant_map, ExampleSet,
    PositiveSpec, TrialExample,
};
pub use loss::{global_loss, in_batch_loss, local_infonce, paired_loss, LossGrad};
pub use mining::{
    build_pools, mine_local_positives, LocalTrainingPair, MiningOutcome, MiningPool, PairRef,
    PoolEntry,
};
pub use optim::{AdamW, AdamWConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{trial_text, Gradients, TinyEncoder, TrialPooling};
use crate::error::{Error, Result};
use crate::evaluation::{Metric, QueryInput};
use crate::model::{EvalQuery, SimilarityLabel, TrainingConfig, TrialQaSet};
use crate::retrieval::TrialIndex;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Local,
    Global,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Local => "local",
            Stage::Global => "global",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Local => 1,
            Stage::Global => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which stages a call to [`train`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub local: bool,
    pub global: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        local: true,
        global: true,
    };
    pub const LOCAL: Stages = Stages {
        local: true,
        global: false,
    };
    pub const GLOBAL: Stages = Stages {
        local: false,
        global: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub precision_at_1: f64,
    pub recall_at_1: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    pub batches: usize,
    pub validation: Option<ValidationScores>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept, when validation ran.
    pub best: Option<(Stage, usize)>,
    pub mined_pairs: usize,
    pub mining_skipped: usize,
    pub examples_skipped: usize,
}

impl TrainingReport {
    pub fn losses(&self, stage: Stage) -> Vec<f64> {
        self.epochs
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| e.loss)
            .collect()
    }
}

/// Corpus and supervision for training.
pub struct TrainingData<'a> {
    pub qa_sets: &'a [TrialQaSet],
    pub labels: &'a [SimilarityLabel],
    pub diseases: &'a BTreeMap<String, BTreeSet<String>>,
    /// Trial queries whose ids and candidates are all in `qa_sets`.
    pub validation: &'a [EvalQuery],
}

/// Called after every epoch with the current weights.
pub type EpochObserver<'o, F> = dyn FnMut(&EpochLog, &TinyEncoder<F>) -> Result<()> + 'o;

/// Validation precision@1, recall@1 and MAP over full-trial queries.
pub fn validate<F: Scalar>(
    encoder: &TinyEncoder<F>,
    qa_sets: &BTreeMap<String, TrialQaSet>,
    queries: &[EvalQuery],
) -> Result<ValidationScores> {
    let mut needed: BTreeSet<&str> = BTreeSet::new();
    for q in queries {
        needed.insert(&q.query_id);
        needed.extend(q.candidates.iter().map(|c| c.trial_id.as_str()));
    }
    let sets: Vec<TrialQaSet> = needed
        .iter()
        .map(|id| {
            qa_sets
                .get(*id)
                .cloned()
                .ok_or_else(|| Error::UnknownTrial(id.to_string()))
        })
        .collect::<Result<_>>()?;
    let index = TrialIndex::build(&sets, encoder, TrialPooling::Joint, "validation")?;
    let retriever = crate::evaluation::DenseRetriever {
        name: "validation".into(),
        index: &index,
        backbone: encoder,
        pooling: TrialPooling::Joint,
    };
    let mut totals = [0.0f64; 3];
    for q in queries {
        let input = QueryInput::Trial(qa_sets[&q.query_id].clone());
        let ranking = crate::evaluation::Retriever::rank(
            &retriever,
            &q.query_id,
            &input,
            &q.candidate_ids(),
        )?;
        let scores = crate::evaluation::score_ranking(&ranking, q)?;
        totals[0] += scores[&Metric::PrecisionAt1];
        totals[1] += scores[&Metric::RecallAt1];
        totals[2] += scores[&Metric::Map];
    }
    let n = queries.len() as f64;
    Ok(ValidationScores {
        precision_at_1: totals[0] / n,
        recall_at_1: totals[1] / n,
        map: totals[2] / n,
    })
}

/// Forwards `texts`, applies `loss` to the outputs and accumulates the
/// parameter gradients.
fn loss_and_gradients<F: Scalar>(
    encoder: &TinyEncoder<F>,
    texts: &[&str],
    loss: impl FnOnce(&[Vec<F>]) -> Result<Vec<Option<Vec<F>>>>,
) -> Result<Gradients<F>> {
    let forwards = texts
        .par_iter()
        .map(|t| encoder.forward(t))
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<Vec<F>> = forwards.iter().map(|f| f.output.clone()).collect();
    let row_grads = loss(&outputs)?;
    let mut grads = Gradients::zeros(encoder.config().dim);
    for (fwd, g) in forwards.iter().zip(row_grads) {
        if let Some(g) = g {
            encoder.backward(fwd, &g, &mut grads);
        }
    }
    Ok(grads)
}

struct Trainer<'a, 'o, F: Scalar> {
    encoder: &'a mut TinyEncoder<F>,
    data: &'a TrainingData<'a>,
    config: &'a TrainingConfig,
    sets: BTreeMap<String, TrialQaSet>,
    report: TrainingReport,
    best: Option<(ValidationScores, TinyEncoder<F>)>,
    observer: &'a mut EpochObserver<'o, F>,
}

impl<F: Scalar> Trainer<'_, '_, F> {
    fn finish_epoch(&mut self, stage: Stage, epoch: usize, losses: &[f64]) -> Result<()> {
        let validation = if self.data.validation.is_empty() {
            None
        } else {
            Some(validate(self.encoder, &self.sets, self.data.validation)?)
        };
        let log = EpochLog {
            stage,
            epoch,
            loss: if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
            batches: losses.len(),
            validation,
        };
        log::info!(
            "{stage} epoch {epoch}: loss {:.6} over {} batches{}",
            log.loss,
            log.batches,
            validation.map_or(String::new(), |v| format!(
                ", validation P@1 {:.4} MAP {:.4}",
                v.precision_at_1, v.map
            ))
        );
        if let Some(v) = validation {
            // later epochs win ties
            let better = self.best.as_ref().map_or(true, |(b, _)| {
                (v.precision_at_1, v.map) >= (b.precision_at_1, b.map)
            });
            if better {
                self.best = Some((v, self.encoder.clone()));
                self.report.best = Some((stage, epoch));
            }
        }
        (self.observer)(&log, self.encoder)?;
        self.report.epochs.push(log);
        Ok(())
    }

    fn check_loss(
        stage: Stage,
        epoch: usize,
        step: usize,
        value: f64,
        grads: &Gradients<F>,
    ) -> Result<()> {
        if value.is_finite() && grads.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                stage: stage.to_string(),
                epoch,
                step,
            })
        }
    }

    fn run_local(&mut self) -> Result<()> {
        let c = self.config;
        if c.epochs_local == 0 {
            return Ok(());
        }
        let pools = build_pools(self.data.qa_sets, &*self.encoder)?;
        let mined = mine_local_positives(&pools)?;
        self.report.mined_pairs = mined.pairs.len();
        self.report.mining_skipped = mined.skipped;
        let texts: BTreeMap<PairRef, String> = self
            .data
            .qa_sets
            .iter()
            .flat_map(|s| {
                s.pairs.iter().map(move |p| {
                    (
                        PairRef {
                            trial_id: s.trial_id.clone(),
                            section: p.section,
                            ordinal: p.ordinal,
                        },
                        p.text(),
                    )
                })
            })
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(Stage::Local.stream());
        let mut opt = AdamW::new(AdamWConfig::new(c.lr_local, c.weight_decay), self.encoder);
        let tau = F::of(c.tau);
        let mut order = mined.pairs;
        for epoch in 1..=c.epochs_local {
            order.shuffle(&mut rng);
            let mut losses = Vec::new();
            for (step, batch) in order.chunks(c.batch_local).enumerate() {
                if batch.len() < 2 {
                    continue;
                }
                let batch_texts: Vec<&str> = batch
                    .iter()
                    .map(|p| texts[&p.anchor].as_str())
                    .chain(batch.iter().map(|p| texts[&p.positive].as_str()))
                    .collect();
                let n = batch.len();
                let mut value = F::zero();
                let grads = loss_and_gradients(self.encoder, &batch_texts, |out| {
                    let lg = local_infonce(&out[..n], &out[n..], tau)?;
                    value = lg.value;
                    Ok(lg
                        .anchors
                        .into_iter()
                        .chain(lg.positives)
                        .map(Some)
                        .collect())
                })?;
                let value = value.to_f64_lossy();
                Self::check_loss(Stage::Local, epoch, step, value, &grads)?;
                opt.step(self.encoder, &grads);
                losses.push(value);
            }
            self.finish_epoch(Stage::Local, epoch, &losses)?;
        }
        Ok(())
    }

    fn run_global(&mut self) -> Result<()> {
        let c = self.config;
        if c.epochs_global == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(Stage::Global.stream());
        let mut opt = AdamW::new(AdamWConfig::new(c.lr_global, c.weight_decay), self.encoder);
        let tau = F::of(c.tau);
        for epoch in 1..=c.epochs_global {
            let ExampleSet { examples, skipped } = build_trial_examples(
                self.data.qa_sets,
                self.data.labels,
                self.data.diseases,
                &mut rng,
            )?;
            self.report.examples_skipped = skipped;
            let labeled_share = if examples.is_empty() {
                0.0
            } else {
                examples.iter().filter(|e| e.is_labeled()).count() as f64 / examples.len() as f64
            };
            let examples = mix_examples(
                examples,
                c.labeled_fraction.unwrap_or(labeled_share),
                &mut rng,
            );

            let mut losses = Vec::new();
            for (step, batch) in examples.chunks(c.batch_global).enumerate() {
                if batch.len() < 2 {
                    continue;
                }
                let mut anchor_texts = Vec::with_capacity(batch.len());
                let mut positive_texts = Vec::with_capacity(batch.len());
                let mut negative_texts = Vec::new();
                for ex in batch {
                    anchor_texts.push(trial_text(&self.sets[&ex.anchor_id]));
                    positive_texts.push(trial_text(positive_set(ex, &self.sets)?.as_ref()));
                    if let Some(neg) = &ex.hard_negative_id {
                        let set = self
                            .sets
                            .get(neg)
                            .ok_or_else(|| Error::UnknownTrial(neg.clone()))?;
                        negative_texts.push(trial_text(set));
                    }
                }
                let n = batch.len();
                let all: Vec<&str> = anchor_texts
                    .iter()
                    .chain(&positive_texts)
                    .chain(&negative_texts)
                    .map(String::as_str)
                    .collect();
                let mut value = F::zero();
                let grads = loss_and_gradients(self.encoder, &all, |out| {
                    let mut next_neg = 2 * n;
                    let negatives: Vec<Option<Vec<F>>> = batch
                        .iter()
                        .map(|ex| {
                            ex.hard_negative_id.as_ref().map(|_| {
                                next_neg += 1;
                                out[next_neg - 1].clone()
                            })
                        })
                        .collect();
                    let lg = global_loss(&out[..n], &out[n..2 * n], &negatives, tau)?;
                    value = lg.value;
                    Ok(lg
                        .anchors
                        .into_iter()
                        .chain(lg.positives)
                        .map(Some)
                        .chain(lg.negatives.into_iter().flatten().map(Some))
                        .collect())
                })?;
                let value = value.to_f64_lossy();
                Self::check_loss(Stage::Global, epoch, step, value, &grads)?;
                opt.step(self.encoder, &grads);
                losses.push(value);
            }
            self.finish_epoch(Stage::Global, epoch, &losses)?;
        }
        Ok(())
    }
}

/// Runs the selected stages in place. With validation queries the encoder
/// ends at the best validated epoch (precision@1, then MAP, then later
/// epoch); otherwise at the last one.
pub fn train<F: Scalar>(
    encoder: &mut TinyEncoder<F>,
    data: &TrainingData<'_>,
    config: &TrainingConfig,
    stages: Stages,
    observer: &mut EpochObserver<'_, F>,
) -> Result<TrainingReport> {
    config.validate()?;
    let sets = data
        .qa_sets
        .iter()
        .map(|s| (s.trial_id.clone(), s.clone()))
        .collect();
    let mut trainer = Trainer {
        encoder,
        data,
        config,
        sets,
        report: TrainingReport::default(),
        best: None,
        observer,
    };
    if stages.local {
        trainer.run_local()?;
    }
    if stages.global {
        trainer.run_global()?;
    }
    if let Some((_, best)) = trainer.best.take() {
        *trainer.encoder = best;
    }
    Ok(trainer.report)
}
