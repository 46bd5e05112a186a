//! Writes a small planted-cluster corpus with a warm LLM cache and a
//! pipeline config into the directory given as the first argument.
//!
//! cargo run -p trialsim-core --example planted_fixture -- crates/cli/tests/fixtures

use std::fs;
use std::path::PathBuf;

use trialsim::ingest::{PatientNote, ReviewGroup};
use trialsim::model::write_records;
use trialsim::qa::CompletionCache;
use trialsim::synthetic::{PlantedConfig, PlantedCorpus};

const MODEL: &str = "fixture-llm";

const CONFIG: &str = r#"[paths]
corpus = "corpus"
review_groups = "review_groups.jsonl"
workdir = "work"
qrels = "qrels.txt"
patient_notes = "patient_notes.jsonl"

[split]
validation_fraction = 0.25
test_fraction = 0.25
candidates_per_query = 10

[training]
epochs_local = 3
epochs_global = 5
lr_local = 1e-3
lr_global = 1e-2
batch_local = 32
batch_global = 16

[encoder]
name = "tiny"
pooling = "joint"

[encoder.tiny]
vocab_size = 2048
dim = 32

[llm]
model_name = "fixture-llm"
cache_dir = "llm_cache"
offline = true
parallelism = 2

[evaluation]
bootstrap_samples = 50
bootstrap_iterations = 100
"#;

fn main() -> trialsim::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let corpus = PlantedCorpus::generate(&PlantedConfig {
        clusters: 4,
        per_cluster: 5,
        train_per_cluster: 5,
        seed: 11,
        ..PlantedConfig::default()
    });
    let io = |e| trialsim::Error::io(&out, e);
    fs::create_dir_all(out.join("corpus")).map_err(io)?;

    write_records(out.join("corpus/trials.jsonl"), &corpus.protocols)?;
    let groups: Vec<ReviewGroup> = corpus
        .train_groups
        .iter()
        .enumerate()
        .map(|(c, g)| ReviewGroup {
            review_id: format!("R{c:02}"),
            member_trial_ids: g.member_trial_ids.clone(),
        })
        .collect();
    write_records(out.join("review_groups.jsonl"), &groups)?;
    corpus.write_cache(&CompletionCache::new(out.join("llm_cache")), MODEL)?;

    let mut notes = Vec::new();
    let mut qrels = String::new();
    for (c, g) in groups.iter().enumerate() {
        let first = corpus
            .protocols
            .iter()
            .find(|p| p.trial_id == g.member_trial_ids[0])
            .expect("member exists");
        let patient_id = format!("P{c}");
        notes.push(PatientNote {
            patient_id: patient_id.clone(),
            note: format!(
                "Patient with {}. Seen for {}. Notes mention {}.",
                first.disease.join(", "),
                first.title.trim_end_matches(" study"),
                first.keywords.join(" and ")
            ),
        });
        for (other_c, other) in groups.iter().enumerate() {
            let grade = match (c == other_c, c / 2 == other_c / 2) {
                (true, _) => 2,
                (false, true) => 1,
                (false, false) => 0,
            };
            for id in &other.member_trial_ids {
                qrels.push_str(&format!("{patient_id} 0 {id} {grade}\n"));
            }
        }
    }
    write_records(out.join("patient_notes.jsonl"), &notes)?;
    fs::write(out.join("qrels.txt"), qrels).map_err(io)?;
    fs::write(out.join("trialsim.toml"), CONFIG).map_err(io)?;
    println!("fixture written to {}", out.display());
    Ok(())
}
