use std::fs;
use std::path::Path;

use loadpat::neural::Grid;
use loadpat::pipeline::{self, PipelineConfig, PipelineError, Stage, StageMarker, REPORT_FILES};
use loadpat::synthgen::{self, GeneratorConfig};

fn inputs(dir: &Path) {
    let g = synthgen::generate(&GeneratorConfig {
        households: 30,
        days: 28,
        seed: 3,
        ..GeneratorConfig::default()
    })
    .unwrap();
    fs::write(dir.join("meter.csv"), &g.meter_csv).unwrap();
    fs::write(dir.join("survey.csv"), &g.survey_csv).unwrap();
}

fn small_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        meter: dir.join("meter.csv"),
        survey: dir.join("survey.csv"),
        out_dir: dir.join("out"),
        seed: 3,
        k_range: (2, 5),
        restarts: 2,
        permutations: 3,
        ..PipelineConfig::default()
    };
    cfg.hyper.grid = Grid {
        hidden_layers: vec![1],
        widths: vec![6],
        learning_rates: vec![0.3],
    };
    cfg.hyper.train.epochs = 30;
    cfg
}

fn marker(dir: &Path) -> StageMarker {
    serde_json::from_str(&fs::read_to_string(dir.join("stage_marker.json")).unwrap()).unwrap()
}

#[test]
fn full_run_writes_every_report_table() {
    let tmp = tempfile::tempdir().unwrap();
    inputs(tmp.path());
    let cfg = small_config(tmp.path());
    let outcome = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(outcome.completed, Stage::ALL.to_vec());
    assert_eq!(marker(&cfg.out_dir).completed, Stage::ALL.to_vec());

    for name in REPORT_FILES {
        let path = cfg.out_dir.join("report").join(name);
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let header = rdr.headers().unwrap().clone();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert!(!rows.is_empty(), "{name} has no rows");
        assert!(rows.iter().all(|r| r.len() == header.len()), "{name} is ragged");
    }

    let mut rdr = csv::Reader::from_path(cfg.out_dir.join("report/pattern_shares.csv")).unwrap();
    let mut totals = [0.0f64; 2];
    for r in rdr.records() {
        let r = r.unwrap();
        for (c, total) in totals.iter_mut().enumerate() {
            *total += r[c + 1].parse::<f64>().unwrap_or(0.0);
        }
    }
    for t in totals {
        assert!((t - 100.0).abs() <= 0.1, "shares sum to {t}");
    }

    let mut rdr = csv::Reader::from_path(cfg.out_dir.join("report/comparison.csv")).unwrap();
    let rows = rdr.records().count();
    assert_eq!(rows, cfg.models.len() * 2);
    assert_eq!(outcome.report.comparison.len(), rows);
    assert!(outcome.report.comparison.iter().all(|r| r.avg_loss.is_finite()));
}

#[test]
fn stage_flag_stops_after_clustering() {
    let tmp = tempfile::tempdir().unwrap();
    inputs(tmp.path());
    let mut cfg = small_config(tmp.path());
    cfg.set("stage", "\"cluster\"").unwrap();
    let outcome = pipeline::run_pipeline(&cfg).unwrap();
    assert_eq!(outcome.completed, vec![Stage::Ingest, Stage::Cluster]);
    assert!(cfg.out_dir.join("cluster_weekday.json").exists());
    assert!(cfg.out_dir.join("cluster_weekend.json").exists());
    assert!(!cfg.out_dir.join("distributions_weekday.csv").exists());
    assert!(!cfg.out_dir.join("report").exists());
    assert!(matches!(
        pipeline::emit_report(&cfg.out_dir),
        Err(PipelineError::MissingArtifact { .. })
    ));
}

#[test]
fn missing_survey_fails_ingest_and_nothing_later() {
    let tmp = tempfile::tempdir().unwrap();
    inputs(tmp.path());
    fs::remove_file(tmp.path().join("survey.csv")).unwrap();
    let cfg = small_config(tmp.path());
    let err = pipeline::run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let m = marker(&cfg.out_dir);
    assert!(m.completed.is_empty());
    assert_eq!(m.failed.unwrap().stage, Stage::Ingest);
    assert!(!cfg.out_dir.join("cluster_weekday.json").exists());
}

#[test]
fn invalid_config_is_rejected_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.k_range = (5, 2);
    let err = pipeline::run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(!cfg.out_dir.exists());
}

#[test]
fn config_file_paths_resolve_against_its_directory() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.json"),
        r#"{"meter":"meter.csv","survey":"survey.csv","out_dir":"out","k_range":[2,4]}"#,
    )
    .unwrap();
    let cfg = PipelineConfig::load(&tmp.path().join("run.json")).unwrap();
    assert_eq!(cfg.meter, tmp.path().join("meter.csv"));
    assert_eq!(cfg.out_dir, tmp.path().join("out"));
    assert_eq!(cfg.k_range, (2, 4));
    fs::write(tmp.path().join("bad.json"), r#"{"no_such_key":1}"#).unwrap();
    assert_eq!(
        PipelineConfig::load(&tmp.path().join("bad.json")).unwrap_err().exit_code(),
        1
    );
}
