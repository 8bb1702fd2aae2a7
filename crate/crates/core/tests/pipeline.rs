mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use abstain_core::fsio;
use abstain_core::harness::pipeline::{FeatureRow, Report, ScoreRow, StatusFile};
use abstain_core::harness::{run_pipeline, Run, STAGES};
use abstain_core::Error;

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn minimal_config_completes_quickly_and_is_reproducible() {
    let cfg = common::minimal_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();

    let start = Instant::now();
    run_pipeline(&cfg, a.path()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "minimal pipeline took {secs:.1}s");

    for f in [
        "config.json",
        "weights.bin",
        "weights.json",
        "corpus.jsonl",
        "features.jsonl",
        "stats.json",
        "calibrator.json",
        "scores.jsonl",
        "report.json",
        "curves.csv",
        "metrics.csv",
        "ablation.csv",
        "status.json",
    ] {
        assert!(a.path().join(f).exists(), "missing {f}");
    }

    let status: StatusFile = fsio::read_json(&a.path().join("status.json")).unwrap();
    assert_eq!(status.completed, STAGES.map(String::from).to_vec());
    assert!(status.failed.is_none());

    let features: Vec<FeatureRow> = fsio::read_jsonl(&a.path().join("features.jsonl")).unwrap();
    assert_eq!(features.len(), 50);
    assert!(features.iter().all(|r| r.features.len() == 8 * 2 - 4));
    assert!(features.iter().all(|r| r.features.iter().all(|v| v.is_finite())));

    let scores: Vec<ScoreRow> = fsio::read_jsonl(&a.path().join("scores.jsonl")).unwrap();
    assert_eq!(scores.len(), 50);
    // perplexity of probabilities in (0, 1] is at least 1
    assert!(scores.iter().all(|s| s.u >= 1.0 && s.u_raw >= 1.0));

    let report: Report = fsio::read_json(&a.path().join("report.json")).unwrap();
    assert_eq!(report.provenance.config_hash, cfg.hash());
    let curves = std::fs::read_to_string(a.path().join("curves.csv")).unwrap();
    assert!(curves.starts_with(&format!("# config_hash={}", cfg.hash())));
    assert_eq!(curves.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 19);

    // a rerun in place and a run elsewhere reproduce every byte
    let before = dir_bytes(a.path());
    run_pipeline(&cfg, a.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), before);
    run_pipeline(&cfg, b.path()).unwrap();
    assert_eq!(dir_bytes(b.path()), before);
}

#[test]
fn full_coverage_aborts_with_insufficient_data() {
    let mut cfg = common::minimal_config();
    cfg.set("task.coverage=1.0").unwrap();
    cfg.set("train.steps=800").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&cfg, dir.path()).err().expect("pipeline must abort");
    assert!(matches!(err.root(), Error::InsufficientData(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    let status: StatusFile = fsio::read_json(&dir.path().join("status.json")).unwrap();
    assert_eq!(status.completed, vec!["train-toy".to_string()]);
    assert_eq!(status.failed.unwrap().stage, "extract");
}

#[test]
fn stages_refuse_outputs_of_another_config() {
    let cfg = common::minimal_config();
    let dir = tempfile::tempdir().unwrap();
    Run::new(cfg.clone(), dir.path()).unwrap().stage("train-toy").unwrap();
    let mut other = cfg;
    other.seed = 1;
    let err = Run::new(other, dir.path()).unwrap().stage("extract").unwrap_err();
    assert!(matches!(err.root(), Error::Format { .. }), "{err}");
    assert!(err.to_string().contains("extract"));
}

#[test]
fn missing_inputs_are_io_errors_tagged_with_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(common::minimal_config(), dir.path()).unwrap();
    let err = run.stage("fit-stats").unwrap_err();
    assert!(matches!(err.root(), Error::Io { .. }), "{err}");
    assert!(err.to_string().starts_with("stage `fit-stats` failed"));
    assert!(run.stage("bogus").is_err());
}

#[test]
fn shipped_configs_parse_and_default_matches_builtin() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = abstain_core::harness::ExperimentConfig::load(&root.join("default.toml")).unwrap();
    assert_eq!(default, abstain_core::harness::ExperimentConfig::default());
    let minimal = abstain_core::harness::ExperimentConfig::load(&root.join("minimal.toml")).unwrap();
    assert_eq!(minimal, common::minimal_config());
}
