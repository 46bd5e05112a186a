//! Bootstrap resampling over queries and the resulting report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::Metric;
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_SIZE: usize = 50;
pub const DEFAULT_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub sample_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl BootstrapSpec {
    pub fn with_seed(seed: u64) -> Self {
        BootstrapSpec {
            sample_size: DEFAULT_SAMPLE_SIZE,
            iterations: DEFAULT_ITERATIONS,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    /// Mean of the iteration means.
    pub mean: f64,
    /// Population standard deviation of the iteration means.
    pub std: f64,
    /// Plain mean of the per-query values.
    pub per_query_mean: f64,
    /// Population standard deviation of the per-query values.
    pub per_query_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub retriever: String,
    pub metrics: Vec<MetricSummary>,
    pub n_queries: usize,
    pub bootstrap: BootstrapSpec,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.get(metric.name()).map(|m| m.mean)
    }

    /// One header row of metric names and one row of `mean ± std`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let cells: Vec<String> = self
            .metrics
            .iter()
            .map(|m| format!("{:.3} ± {:.3}", m.mean, m.std))
            .collect();
        let widths: Vec<usize> = self
            .metrics
            .iter()
            .zip(&cells)
            .map(|(m, c)| m.metric.chars().count().max(c.chars().count()))
            .collect();
        let label_w = self.retriever.chars().count().max(9);
        let _ = write!(out, "| {:label_w$} |", "retriever");
        for (m, w) in self.metrics.iter().zip(&widths) {
            let _ = write!(out, " {:^w$} |", m.metric);
        }
        out.push('\n');
        let _ = write!(out, "|{}|", "-".repeat(label_w + 2));
        for w in &widths {
            let _ = write!(out, "{}|", "-".repeat(w + 2));
        }
        out.push('\n');
        let _ = write!(out, "| {:label_w$} |", self.retriever);
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, " {c:^w$} |");
        }
        out.push('\n');
        let _ = writeln!(
            out,
            "\n{} queries; bootstrap {} samples x {} iterations, seed {}",
            self.n_queries,
            self.bootstrap.sample_size,
            self.bootstrap.iterations,
            self.bootstrap.seed
        );
        out
    }
}

/// Mean shifted by the first value, so identical inputs give exactly that
/// value and a zero deviation.
fn shifted_mean(xs: impl ExactSizeIterator<Item = f64> + Clone) -> f64 {
    let n = xs.len() as f64;
    let first = xs.clone().next().unwrap_or(0.0);
    first + xs.map(|x| x - first).sum::<f64>() / n
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let mean = shifted_mean(xs.iter().copied());
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Resamples queries with replacement `iterations` times (the same draw
/// serves every metric) and summarizes each metric's iteration means.
pub fn bootstrap_report(
    retriever: &str,
    per_query: &BTreeMap<Metric, Vec<f64>>,
    spec: BootstrapSpec,
) -> Result<MetricReport> {
    let n = per_query.values().next().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::InvalidInput(
            "bootstrap needs at least one query".into(),
        ));
    }
    if per_query.values().any(|v| v.len() != n) {
        return Err(Error::InvalidInput(
            "metric score lists differ in length".into(),
        ));
    }
    if spec.sample_size == 0 || spec.iterations == 0 {
        return Err(Error::Config(
            "bootstrap sample size and iterations must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws: Vec<Vec<usize>> = (0..spec.iterations)
        .map(|_| (0..spec.sample_size).map(|_| rng.gen_range(0..n)).collect())
        .collect();

    let metrics = per_query
        .iter()
        .map(|(&metric, scores)| {
            let iteration_means: Vec<f64> = draws
                .iter()
                .map(|d| shifted_mean(d.iter().map(|&i| scores[i])))
                .collect();
            let (mean, std) = mean_std(&iteration_means);
            let (per_query_mean, per_query_std) = mean_std(scores);
            MetricSummary {
                metric: metric.name().to_string(),
                mean,
                std,
                per_query_mean,
                per_query_std,
            }
        })
        .collect();
    Ok(MetricReport {
        retriever: retriever.to_string(),
        metrics,
        n_queries: n,
        bootstrap: spec,
    })
}
