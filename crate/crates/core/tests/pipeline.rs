//! End-to-end pipeline through the CLI surface: fixture -> ingest -> sweep
//! -> report, plus checkpoint evaluate/simulate and reproducibility checks.

use std::fs;
use std::path::Path;

use pathode::cli::execute;
use pathode::harness::{MetricsReport, SweepSummary};

fn run_ok(args: &[&str]) {
    let code = execute(args.iter().map(|s| s.to_string()));
    assert_eq!(code, 0, "command failed: {args:?}");
}

fn quick_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "dataset": dir.join("cache").to_str().unwrap(),
        "output_dir": out.to_str().unwrap(),
        "adam": {"epochs": 10, "lr": 1e-3},
        "lbfgs": {"max_iters": 8},
        "lambdas": [0.01, 1.0, 1000.0],
        "slice_grid": 6,
        "seed": 21
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_cli_pipeline_on_fixture_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = dir.join("out");

    run_ok(&[
        "pathode",
        "fixture",
        "--out",
        dir.to_str().unwrap(),
        "--pathway",
        "limonene",
        "--seed",
        "7",
    ]);
    assert!(dir.join("limonene.csv").exists());

    run_ok(&[
        "pathode",
        "ingest",
        "--data",
        dir.join("limonene.csv").to_str().unwrap(),
        "--pathway",
        "limonene",
        "--out",
        dir.join("cache").to_str().unwrap(),
    ]);
    assert!(dir.join("cache/dataset.json").exists());
    assert!(dir.join("cache/strain_L1.csv").exists());

    let cfg_path = quick_config(dir, &out);
    run_ok(&["pathode", "sweep", "--config", cfg_path.to_str().unwrap()]);

    // Reproducibility audit trail.
    assert!(out.join("effective_config.json").exists());
    let version = fs::read_to_string(out.join("tool_version.txt")).unwrap();
    assert!(version.contains("pathode"));

    // One report per lambda plus the summary pair.
    let summary: SweepSummary =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.trials.len(), 3);
    assert!(summary.trials.iter().all(|t| t.error.is_none()));
    assert!(summary.best_lambda.is_some());
    let table = fs::read_to_string(out.join("summary.txt")).unwrap();
    for header in [
        "0.01",
        "1.00",
        "1000.00",
        "Baseline",
        "Mean RMSE",
        "% Improvement",
    ] {
        assert!(table.contains(header), "summary missing {header}");
    }

    for trial in &summary.trials {
        assert!(trial.dir.join("checkpoint.ckpt").exists());
        assert!(trial.dir.join("report.json").exists());
        assert!(trial.dir.join("fit.json").exists());
        assert!(trial.dir.join("predicted.csv").exists());
        let report: MetricsReport =
            serde_json::from_str(&fs::read_to_string(trial.dir.join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report.per_feature_rmse.len(), 13);
        assert!(report.pct_improvement.is_some());
        assert_eq!(report.test_strain, "L2");
    }

    // report re-renders from stored outputs.
    run_ok(&["pathode", "report", "--dir", out.to_str().unwrap()]);

    // evaluate an existing checkpoint.
    let ckpt = summary.trials[1].dir.join("checkpoint.ckpt");
    run_ok(&[
        "pathode",
        "evaluate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--output-dir",
        dir.join("eval_out").to_str().unwrap(),
    ]);
    assert!(dir.join("eval_out/report.json").exists());

    // simulate writes a trajectory CSV with time + 23 feature columns.
    let sim_csv = dir.join("sim.csv");
    run_ok(&[
        "pathode",
        "simulate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        dir.join("cache").to_str().unwrap(),
        "--out",
        sim_csv.to_str().unwrap(),
    ]);
    let mut rdr = csv::Reader::from_path(&sim_csv).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 24);
    assert_eq!(rdr.records().count(), 200);
}

#[test]
fn sweep_outputs_are_idempotent_modulo_timings() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_ok(&[
        "pathode",
        "fixture",
        "--out",
        dir.to_str().unwrap(),
        "--pathway",
        "isopentenol",
    ]);
    run_ok(&[
        "pathode",
        "ingest",
        "--data",
        dir.join("isopentenol.csv").to_str().unwrap(),
        "--pathway",
        "isopentenol",
        "--out",
        dir.join("cache").to_str().unwrap(),
    ]);

    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(run);
        let cfg = serde_json::json!({
            "dataset": dir.join("cache").to_str().unwrap(),
            "output_dir": out.to_str().unwrap(),
            "adam": {"epochs": 6, "lr": 1e-3},
            "lbfgs": {"max_iters": 4},
            "lambdas": [1.0],
            "slice_grid": 5,
            "seed": 33
        });
        let cfg_path = dir.join(format!("cfg_{run}.json"));
        fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
        run_ok(&["pathode", "sweep", "--config", cfg_path.to_str().unwrap()]);
        let report: MetricsReport =
            serde_json::from_str(&fs::read_to_string(out.join("lambda_1_00/report.json")).unwrap())
                .unwrap();
        reports.push(report);
    }

    let (a, b) = (&reports[0], &reports[1]);
    assert_eq!(a.mean_rmse.to_bits(), b.mean_rmse.to_bits());
    for (x, y) in a.per_feature_rmse.values().zip(b.per_feature_rmse.values()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    // Timing fields are the only exempt difference; checkpoints match bitwise.
    let ck_a = fs::read(dir.join("a/lambda_1_00/checkpoint.ckpt")).unwrap();
    let ck_b = fs::read(dir.join("b/lambda_1_00/checkpoint.ckpt")).unwrap();
    assert_eq!(ck_a, ck_b);
}

#[test]
fn evaluate_with_missing_checkpoint_fails_with_path_in_message() {
    let tmp = tempfile::tempdir().unwrap();
    let code = execute(
        [
            "pathode",
            "evaluate",
            "--checkpoint",
            tmp.path().join("nope.ckpt").to_str().unwrap(),
            "--data",
            tmp.path().to_str().unwrap(),
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    assert_eq!(code, 1);
}

#[test]
fn train_respects_lambda_flag_and_writes_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_ok(&[
        "pathode",
        "fixture",
        "--out",
        dir.to_str().unwrap(),
        "--pathway",
        "limonene",
    ]);
    run_ok(&[
        "pathode",
        "ingest",
        "--data",
        dir.join("limonene.csv").to_str().unwrap(),
        "--pathway",
        "limonene",
        "--out",
        dir.join("cache").to_str().unwrap(),
    ]);
    let out = dir.join("train_out");
    let cfg = serde_json::json!({
        "dataset": dir.join("cache").to_str().unwrap(),
        "output_dir": out.to_str().unwrap(),
        "adam": {"epochs": 5, "lr": 1e-3},
        "lbfgs": {"max_iters": 3},
        "slice_grid": 5
    });
    let cfg_path = dir.join("cfg.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    run_ok(&[
        "pathode",
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--lambda",
        "1000",
    ]);
    let report: MetricsReport =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.lambda, 1000.0);
    assert!(out.join("checkpoint.ckpt").exists());
}
