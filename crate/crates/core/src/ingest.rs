//! Registry export parsing and labeled split construction.
//!
//! Two export layouts are understood:
//!
//! * an AACT-style directory of pipe-delimited tables (`studies.txt`,
//!   `conditions.txt`, `interventions.txt`, `keywords.txt`,
//!   `design_outcomes.txt`, `eligibilities.txt`), keyed by `nct_id`;
//! * line-delimited JSON files (`*.jsonl`) with one raw record per line,
//!   using the protocol field names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{
    dedup_preserving, validate_protocol, Candidate, EvalQuery, LabelSource, QueryKind, Record,
    RecordContext, SimilarityLabel, TrialProtocol,
};

/// A set of trials a systematic review analyzed together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewGroup {
    pub review_id: String,
    pub member_trial_ids: Vec<String>,
}

impl Record for ReviewGroup {
    fn check(&self, _: &RecordContext) -> Result<()> {
        let distinct: BTreeSet<_> = self.member_trial_ids.iter().collect();
        if distinct.len() < 2 {
            return Err(Error::SchemaViolation(format!(
                "review group {} needs at least two distinct trials",
                self.review_id
            )));
        }
        Ok(())
    }
}

/// A patient's free-text clinical note.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientNote {
    pub patient_id: String,
    pub note: String,
}

impl Record for PatientNote {
    fn check(&self, _: &RecordContext) -> Result<()> {
        if self.patient_id.trim().is_empty() || self.note.trim().is_empty() {
            return Err(Error::SchemaViolation(format!(
                "patient `{}` has an empty id or note",
                self.patient_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub trials: Vec<TrialProtocol>,
    pub malformed: usize,
    pub duplicates: usize,
    pub dropped_keys: usize,
}

/// Parses every recognizable export under `path` (a directory or a single
/// `.jsonl` file). Malformed rows are counted, not fatal; the first record
/// seen for a trial id wins.
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<IngestReport> {
    let path = path.as_ref();
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();

    let mut jsonl_files = Vec::new();
    if meta.is_file() {
        jsonl_files.push(path.to_path_buf());
    } else {
        if path.join("studies.txt").is_file() {
            for protocol in read_aact(path, &mut report)? {
                push_unique(&mut report, &mut seen, protocol);
            }
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        jsonl_files.extend(entries);
    }
    for file in jsonl_files {
        read_jsonl_export(&file, &mut report, &mut seen)?;
    }

    if report.trials.is_empty() {
        return Err(Error::Format(path.display().to_string()));
    }
    if report.malformed > 0 || report.duplicates > 0 {
        log::warn!(
            "ingest: {} malformed rows, {} duplicate trial ids skipped",
            report.malformed,
            report.duplicates
        );
    }
    Ok(report)
}

fn push_unique(report: &mut IngestReport, seen: &mut BTreeSet<String>, p: TrialProtocol) {
    if seen.insert(p.trial_id.clone()) {
        report.trials.push(p);
    } else {
        report.duplicates += 1;
    }
}

fn read_jsonl_export(
    path: &Path,
    report: &mut IngestReport,
    seen: &mut BTreeSet<String>,
) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(&line)
            .ok()
            .and_then(|v| v.as_object().cloned());
        let Some(obj) = parsed else {
            report.malformed += 1;
            continue;
        };
        match validate_protocol(&obj) {
            Ok(v) => {
                report.dropped_keys += v.dropped_keys.len();
                push_unique(report, seen, v.protocol);
            }
            Err(_) => report.malformed += 1,
        }
    }
    Ok(())
}

fn aact_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'|')
        .flexible(true)
        .from_reader(file))
}

/// Reads a pipe-delimited table into maps of column name to value.
fn read_table(path: &Path, malformed: &mut usize) -> Result<Vec<BTreeMap<String, String>>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut reader = aact_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let mut rows = Vec::new();
    for record in reader.records() {
        match record {
            Ok(r) if r.len() == headers.len() => rows.push(
                headers
                    .iter()
                    .zip(r.iter())
                    .map(|(h, v)| (h.to_string(), v.trim().to_string()))
                    .collect(),
            ),
            _ => *malformed += 1,
        }
    }
    Ok(rows)
}

fn read_aact(dir: &Path, report: &mut IngestReport) -> Result<Vec<TrialProtocol>> {
    let mut malformed = 0;
    let studies = read_table(&dir.join("studies.txt"), &mut malformed)?;

    let mut multi: BTreeMap<(&'static str, String), Vec<String>> = BTreeMap::new();
    for (table, key) in [
        ("conditions.txt", "disease"),
        ("interventions.txt", "intervention"),
        ("keywords.txt", "keywords"),
    ] {
        for row in read_table(&dir.join(table), &mut malformed)? {
            if let (Some(id), Some(name)) = (row.get("nct_id"), row.get("name")) {
                multi
                    .entry((key, id.clone()))
                    .or_default()
                    .push(name.clone());
            }
        }
    }
    let mut outcomes: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in read_table(&dir.join("design_outcomes.txt"), &mut malformed)? {
        let primary = row
            .get("outcome_type")
            .is_none_or(|t| t.eq_ignore_ascii_case("primary"));
        if !primary {
            continue;
        }
        if let Some(id) = row.get("nct_id") {
            let entry = outcomes.entry(id.clone()).or_default();
            for col in ["measure", "time_frame"] {
                if let Some(v) = row.get(col).filter(|v| !v.is_empty()) {
                    entry.push(v.clone());
                }
            }
        }
    }
    let mut criteria: BTreeMap<String, String> = BTreeMap::new();
    for row in read_table(&dir.join("eligibilities.txt"), &mut malformed)? {
        if let (Some(id), Some(c)) = (row.get("nct_id"), row.get("criteria")) {
            criteria.entry(id.clone()).or_insert_with(|| c.clone());
        }
    }

    let mut out = Vec::new();
    for row in studies {
        let Some(id) = row.get("nct_id").filter(|s| !s.is_empty()).cloned() else {
            malformed += 1;
            continue;
        };
        let title = row
            .get("brief_title")
            .filter(|s| !s.is_empty())
            .or_else(|| row.get("official_title"))
            .cloned()
            .unwrap_or_default();
        let take = |multi: &mut BTreeMap<_, Vec<String>>, key| {
            dedup_preserving(multi.remove(&(key, id.clone())).unwrap_or_default())
        };
        let protocol = TrialProtocol {
            disease: take(&mut multi, "disease"),
            intervention: take(&mut multi, "intervention"),
            keywords: take(&mut multi, "keywords"),
            outcome: dedup_preserving(outcomes.remove(&id).unwrap_or_default()).join(", "),
            eligibility_criteria: criteria.remove(&id).unwrap_or_default(),
            title,
            trial_id: id,
        };
        match protocol.validate() {
            Ok(()) => out.push(protocol),
            Err(_) => malformed += 1,
        }
    }
    report.malformed += malformed;
    Ok(out)
}

/// Emits a relevant label for every ordered pair of distinct members within
/// each group. Pairs repeated across groups are emitted once.
pub fn build_labels(
    groups: &[ReviewGroup],
    corpus: &[TrialProtocol],
) -> Result<Vec<SimilarityLabel>> {
    let ids: BTreeSet<&str> = corpus.iter().map(|p| p.trial_id.as_str()).collect();
    let mut seen = BTreeSet::new();
    let mut labels = Vec::new();
    for group in groups {
        let members = dedup_preserving(group.member_trial_ids.clone());
        if let Some(missing) = members.iter().find(|m| !ids.contains(m.as_str())) {
            return Err(Error::UnknownTrial(missing.clone()));
        }
        for a in &members {
            for b in &members {
                if a != b && seen.insert((a.clone(), b.clone())) {
                    labels.push(SimilarityLabel {
                        query_trial_id: a.clone(),
                        candidate_trial_id: b.clone(),
                        relevant: true,
                        source: LabelSource::Review,
                    });
                }
            }
        }
    }
    Ok(labels)
}

/// Review groups partitioned into train / validation / test.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupSplit {
    pub train: Vec<ReviewGroup>,
    pub validation: Vec<ReviewGroup>,
    pub test: Vec<ReviewGroup>,
}

impl GroupSplit {
    pub fn train_trial_ids(&self) -> BTreeSet<String> {
        member_ids(&self.train)
    }
}

pub fn member_ids(groups: &[ReviewGroup]) -> BTreeSet<String> {
    groups
        .iter()
        .flat_map(|g| g.member_trial_ids.iter().cloned())
        .collect()
}

/// Splits by group, never by trial. Groups are ordered by id, shuffled with
/// the seed, and the first slices go to test then validation.
pub fn split_groups(
    groups: &[ReviewGroup],
    validation_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<GroupSplit> {
    if !(0.0..=1.0).contains(&validation_fraction)
        || !(0.0..=1.0).contains(&test_fraction)
        || validation_fraction + test_fraction > 1.0
    {
        return Err(Error::Config(format!(
            "invalid split fractions {validation_fraction}/{test_fraction}"
        )));
    }
    let mut sorted = groups.to_vec();
    sorted.sort_by(|a, b| a.review_id.cmp(&b.review_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n = sorted.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_val = ((validation_fraction * n as f64).round() as usize).min(n - n_test);
    let mut rest = sorted.split_off(n_test);
    let test = sorted;
    let train = rest.split_off(n_val);
    Ok(GroupSplit {
        train,
        validation: rest,
        test,
    })
}

/// Builds fixed-length candidate lists for every query trial with a relevant label.
///
/// Each list holds the query's relevant trials (at most `per_query - 1`,
/// smallest ids first) plus negatives drawn from trials sharing a disease
/// with the query, falling back to uniformly random trials. Trials in
/// `exclude` (typically the training split) are never drawn as negatives.
/// Candidates are emitted sorted by trial id.
pub fn build_eval_queries(
    labels: &[SimilarityLabel],
    corpus: &[TrialProtocol],
    per_query: usize,
    seed: u64,
    exclude: &BTreeSet<String>,
) -> Result<Vec<EvalQuery>> {
    if per_query < 2 {
        return Err(Error::Config("per_query must be at least 2".into()));
    }
    if corpus.len().saturating_sub(1) < per_query {
        return Err(Error::InsufficientCorpus {
            needed: per_query,
            available: corpus.len().saturating_sub(1),
        });
    }
    let by_id: BTreeMap<&str, &TrialProtocol> =
        corpus.iter().map(|p| (p.trial_id.as_str(), p)).collect();
    let mut sorted_ids: Vec<&str> = by_id.keys().copied().collect();
    sorted_ids.sort_unstable();

    let mut relevant: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for l in labels.iter().filter(|l| l.relevant) {
        for id in [&l.query_trial_id, &l.candidate_trial_id] {
            if !by_id.contains_key(id.as_str()) {
                return Err(Error::UnknownTrial(id.clone()));
            }
        }
        relevant
            .entry(l.query_trial_id.as_str())
            .or_default()
            .insert(l.candidate_trial_id.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::with_capacity(relevant.len());
    for (&query, rel) in &relevant {
        let positives: Vec<&str> = rel.iter().copied().take(per_query - 1).collect();
        let needed = per_query - positives.len();
        let query_diseases = by_id[query].disease_keys();
        let allowed = |id: &&str| *id != query && !rel.contains(id) && !exclude.contains(*id);

        let mut same_disease: Vec<&str> = sorted_ids
            .iter()
            .copied()
            .filter(allowed)
            .filter(|id| !by_id[id].disease_keys().is_disjoint(&query_diseases))
            .collect();
        same_disease.shuffle(&mut rng);
        let mut negatives: Vec<&str> = same_disease.into_iter().take(needed).collect();

        if negatives.len() < needed {
            let chosen: BTreeSet<&str> = negatives.iter().copied().collect();
            let mut others: Vec<&str> = sorted_ids
                .iter()
                .copied()
                .filter(allowed)
                .filter(|id| !chosen.contains(id))
                .collect();
            others.shuffle(&mut rng);
            let short = needed - negatives.len();
            if others.len() < short {
                return Err(Error::InsufficientCorpus {
                    needed: per_query,
                    available: positives.len() + negatives.len() + others.len(),
                });
            }
            negatives.extend(others.into_iter().take(short));
        }

        let mut candidates: Vec<Candidate> = positives
            .iter()
            .map(|id| Candidate {
                trial_id: id.to_string(),
                relevant: true,
            })
            .chain(negatives.iter().map(|id| Candidate {
                trial_id: id.to_string(),
                relevant: false,
            }))
            .collect();
        candidates.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
        queries.push(EvalQuery {
            query_id: query.to_string(),
            query_kind: QueryKind::FullTrial,
            candidates,
        });
    }
    Ok(queries)
}

/// Reads TREC-style relevance judgments (`topic 0 doc_id grade` per line).
///
/// Each topic becomes a patient query whose candidates are all judged trials
/// present in `corpus_ids`; a trial is relevant when its grade reaches
/// `min_relevant_grade`. Topics without any relevant judged trial are skipped.
pub fn read_trec_qrels(
    path: impl AsRef<Path>,
    corpus_ids: &BTreeSet<String>,
    min_relevant_grade: i32,
) -> Result<Vec<EvalQuery>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut judged: BTreeMap<String, BTreeMap<String, bool>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [topic, _, doc, grade] = fields[..] else {
            return Err(Error::Format(format!("{} line {}", path.display(), i + 1)));
        };
        let grade: i32 = grade
            .parse()
            .map_err(|_| Error::Format(format!("{} line {}", path.display(), i + 1)))?;
        if corpus_ids.contains(doc) {
            judged
                .entry(topic.to_string())
                .or_default()
                .insert(doc.to_string(), grade >= min_relevant_grade);
        }
    }
    Ok(judged
        .into_iter()
        .filter(|(_, docs)| docs.values().any(|&r| r))
        .map(|(topic, docs)| EvalQuery {
            query_id: topic,
            query_kind: QueryKind::Patient,
            candidates: docs
                .into_iter()
                .map(|(trial_id, relevant)| Candidate { trial_id, relevant })
                .collect(),
        })
        .collect())
}
