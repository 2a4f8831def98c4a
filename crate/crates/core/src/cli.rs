//! Command-line front end: `fixture`, `ingest`, `train`, `simulate`,
//! `evaluate`, `sweep`, `report`. Runtime failures print a machine-readable
//! JSON object on stderr and exit nonzero; usage errors exit 2.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::dataio::{
    build_dataset, load_csv, write_fixture, BuildOptions, DataError, Dataset, FeatureSchema,
    InterpMode, Pathway,
};
use crate::field::{FieldError, FieldParams};
use crate::harness::{
    self, render_report_table, write_trajectory_csv, ExperimentConfig, HarnessError, MetricsReport,
    SweepSummary,
};
use crate::odeint::Method;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("{0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Harness(e) => e.kind(),
            CliError::Data(e) => e.kind(),
            CliError::Field(_) => "CheckpointError",
            CliError::Config(_) => "ConfigError",
            CliError::Io(_) => "IoError",
            CliError::Json(_) => "ConfigError",
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Parser, Debug)]
#[command(
    name = "pathode",
    version,
    about = "Neural-ODE dynamics learning for strain time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonOpts {
    /// JSON experiment config; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset path: raw CSV or a processed cache directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// limonene | isopentenol (required for raw CSV ingestion).
    #[arg(long)]
    pub pathway: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Hold out this strain instead of the pathway default.
    #[arg(long)]
    pub test_strain: Option<String>,
    /// Training integrator: rk4_fixed (default) or dopri8.
    #[arg(long)]
    pub train_method: Option<String>,
    /// One-step-ahead training instead of whole-trajectory matching.
    #[arg(long)]
    pub per_point: bool,
    /// Parallel sweep trials.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic 3-strain fixture CSVs matching the input schema.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        /// limonene | isopentenol | both
        #[arg(long, default_value = "both")]
        pathway: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Interpolate + normalize a raw CSV into a dataset cache directory.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pathway: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        test_strain: Option<String>,
        /// monotone_cubic | linear
        #[arg(long)]
        interpolation: Option<String>,
        #[arg(long)]
        n_points: Option<usize>,
    },
    /// Train one model and evaluate it on the held-out strain.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Regularization strength (defaults to the config's first lambda).
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Integrate a checkpoint from a strain's initial state.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pathway: Option<String>,
        /// Strain whose first row seeds the solve (default: test strain).
        #[arg(long)]
        strain: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rtol: Option<f64>,
        #[arg(long)]
        atol: Option<f64>,
    },
    /// Score an existing checkpoint on the held-out strain.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Train/evaluate once per lambda and write the summary table.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Re-render reports stored in an output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Parse and run, mapping runtime errors to a JSON report on stderr.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints usage/help itself; exit code 2 for usage errors.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let report = ErrorReport {
                error: ErrorBody {
                    kind: e.kind(),
                    message: e.to_string(),
                },
            };
            eprintln!(
                "{}",
                serde_json::to_string(&report)
                    .unwrap_or_else(|_| format!("{{\"error\":{{\"message\":\"{e}\"}}}}"))
            );
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fixture { out, pathway, seed } => cmd_fixture(&out, &pathway, seed),
        Command::Ingest {
            data,
            pathway,
            out,
            test_strain,
            interpolation,
            n_points,
        } => cmd_ingest(&data, &pathway, &out, test_strain, interpolation, n_points),
        Command::Train { common, lambda } => cmd_train(common, lambda),
        Command::Simulate {
            checkpoint,
            data,
            pathway,
            strain,
            out,
            rtol,
            atol,
        } => cmd_simulate(&checkpoint, &data, pathway, strain, &out, rtol, atol),
        Command::Evaluate {
            common,
            checkpoint,
            lambda,
        } => cmd_evaluate(common, &checkpoint, lambda),
        Command::Sweep { common } => cmd_sweep(common),
        Command::Report { dir } => cmd_report(&dir),
    }
}

/// Merge a config file (if any) with flag overrides; flags win.
fn effective_config(common: &CommonOpts) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &common.data {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = &common.pathway {
        cfg.pathway = Some(v.clone());
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &common.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &common.test_strain {
        cfg.test_strain = Some(v.clone());
    }
    if let Some(v) = &common.train_method {
        cfg.train_solve.method = parse_method(v)?;
    }
    if common.per_point {
        cfg.per_point = true;
    }
    if let Some(v) = common.jobs {
        cfg.jobs = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    match s {
        "rk4_fixed" | "rk4" => Ok(Method::Rk4Fixed),
        "dopri8" => Ok(Method::Dopri8),
        other => Err(CliError::Config(format!(
            "unknown train method '{other}' (expected rk4_fixed or dopri8)"
        ))),
    }
}

fn parse_interp(s: &str) -> Result<InterpMode, CliError> {
    match s {
        "monotone_cubic" => Ok(InterpMode::MonotoneCubic),
        "linear" => Ok(InterpMode::Linear),
        other => Err(CliError::Config(format!(
            "unknown interpolation '{other}' (expected monotone_cubic or linear)"
        ))),
    }
}

fn cmd_fixture(out: &Path, pathway: &str, seed: u64) -> Result<(), CliError> {
    let pathways: Vec<Pathway> = match pathway {
        "both" => vec![Pathway::Limonene, Pathway::Isopentenol],
        other => vec![Pathway::parse(other)?],
    };
    for p in pathways {
        let path = write_fixture(out, p, seed)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_ingest(
    data: &Path,
    pathway: &str,
    out: &Path,
    test_strain: Option<String>,
    interpolation: Option<String>,
    n_points: Option<usize>,
) -> Result<(), CliError> {
    let pathway = Pathway::parse(pathway)?;
    let schema = FeatureSchema::for_pathway(pathway);
    let raw = load_csv(data, &schema)?;
    for w in &raw.warnings {
        eprintln!("warning: {w}");
    }
    let mut opts = BuildOptions {
        test_strain,
        ..BuildOptions::default()
    };
    if let Some(i) = interpolation {
        opts.interpolation = parse_interp(&i)?;
    }
    if let Some(n) = n_points {
        opts.n_points = n;
    }
    let ds = build_dataset(&raw, &opts)?;
    ds.save_cache(out)?;
    fs::write(
        out.join("tool_version.txt"),
        format!("pathode {}\n", env!("CARGO_PKG_VERSION")),
    )?;
    println!(
        "cached {} strains x {} points x {} features -> {}",
        ds.strain_ids().len(),
        ds.n_points(),
        ds.dim(),
        out.display()
    );
    Ok(())
}

fn cmd_train(common: CommonOpts, lambda: Option<f64>) -> Result<(), CliError> {
    let cfg = effective_config(&common)?;
    let ds = harness::load_dataset(&cfg)?;
    let lambda = lambda.unwrap_or(cfg.lambdas[0]);
    harness::write_run_metadata(&cfg, &cfg.output_dir)?;
    let report = harness::run_trial(&cfg, &ds, lambda, cfg.seed, &cfg.output_dir)?;
    print!("{}", render_report_table(&report, ds.pathway));
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn load_dataset_at(path: &Path, pathway: Option<&str>) -> Result<Dataset, CliError> {
    if path.is_dir() {
        return Ok(Dataset::load_cache(path)?);
    }
    let pathway =
        pathway.ok_or_else(|| CliError::Config("raw CSV ingestion needs --pathway".into()))?;
    let schema = FeatureSchema::for_pathway(Pathway::parse(pathway)?);
    let raw = load_csv(path, &schema)?;
    Ok(build_dataset(&raw, &BuildOptions::default())?)
}

fn cmd_simulate(
    checkpoint: &Path,
    data: &Path,
    pathway: Option<String>,
    strain: Option<String>,
    out: &Path,
    rtol: Option<f64>,
    atol: Option<f64>,
) -> Result<(), CliError> {
    let (params, _seed) = FieldParams::load_checkpoint(checkpoint)?;
    let ds = load_dataset_at(data, pathway.as_deref())?;
    if params.spec.input_dim != ds.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} features but dataset has {}",
            params.spec.input_dim,
            ds.dim()
        )));
    }
    let strain = strain.unwrap_or_else(|| ds.split.test.clone());
    let matrix = ds.strain(&strain)?;
    let u0 = &matrix[..ds.dim()];

    let mut opts = crate::odeint::SolveOptions::default();
    if let Some(r) = rtol {
        opts.rtol = r;
    }
    if let Some(a) = atol {
        opts.atol = a;
    }
    let (traj, secs) = harness::simulate(&params, u0, &ds.grid, &opts)?;
    write_trajectory_csv(out, &traj, &ds.feature_names)?;
    println!(
        "simulated strain {strain}: {} points x {} features in {secs:.4} s -> {}",
        traj.len(),
        ds.dim(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    common: CommonOpts,
    checkpoint: &Path,
    lambda: Option<f64>,
) -> Result<(), CliError> {
    let cfg = effective_config(&common)?;
    let (params, seed) = FieldParams::load_checkpoint(checkpoint)?;
    let ds = harness::load_dataset(&cfg)?;
    if params.spec.input_dim != ds.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} features but dataset has {}",
            params.spec.input_dim,
            ds.dim()
        )));
    }
    harness::write_run_metadata(&cfg, &cfg.output_dir)?;
    let outcome = harness::evaluate(
        &cfg,
        &ds,
        &params,
        lambda.unwrap_or(cfg.lambdas[0]),
        seed,
        0.0,
    )?;
    harness::emit_artifacts(&cfg, &ds, &params, &outcome, &cfg.output_dir)?;
    print!("{}", render_report_table(&outcome.report, ds.pathway));
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_sweep(common: CommonOpts) -> Result<(), CliError> {
    let cfg = effective_config(&common)?;
    let ds = harness::load_dataset(&cfg)?;
    harness::write_run_metadata(&cfg, &cfg.output_dir)?;
    let outcome = harness::sweep(&cfg, &ds)?;
    print!(
        "{}",
        fs::read_to_string(cfg.output_dir.join("summary.txt"))?
    );
    let failed = outcome
        .summary
        .trials
        .iter()
        .filter(|t| t.error.is_some())
        .count();
    if failed > 0 {
        eprintln!("{failed} trial(s) failed; see summary.json");
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<(), CliError> {
    let summary_path = dir.join("summary.json");
    if summary_path.exists() {
        let summary: SweepSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)?;
        for trial in &summary.trials {
            let report_path = trial.dir.join("report.json");
            if report_path.exists() {
                let report: MetricsReport =
                    serde_json::from_str(&fs::read_to_string(&report_path)?)?;
                let pathway = report
                    .pathway
                    .as_deref()
                    .and_then(|p| Pathway::parse(p).ok());
                println!("lambda = {}", trial.lambda);
                print!("{}", render_report_table(&report, pathway));
                println!();
            } else if let Some(err) = &trial.error {
                println!("lambda = {}: FAILED: {err}\n", trial.lambda);
            }
        }
        let txt = dir.join("summary.txt");
        if txt.exists() {
            print!("{}", fs::read_to_string(txt)?);
        }
        return Ok(());
    }

    let report_path = dir.join("report.json");
    if report_path.exists() {
        let report: MetricsReport = serde_json::from_str(&fs::read_to_string(&report_path)?)?;
        let pathway = report
            .pathway
            .as_deref()
            .and_then(|p| Pathway::parse(p).ok());
        print!("{}", render_report_table(&report, pathway));
        return Ok(());
    }
    Err(CliError::Config(format!(
        "no summary.json or report.json under {}",
        dir.display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_usage_error_with_exit_2() {
        let code = execute(["pathode", "train", "--no-such-flag"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let code = execute(["pathode", "frobnicate"]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_checkpoint_reports_path_and_fails() {
        let tmp = tempfile::tempdir().unwrap();
        let code = execute([
            "pathode",
            "simulate",
            "--checkpoint",
            tmp.path().join("missing.ckpt").to_str().unwrap(),
            "--data",
            tmp.path().to_str().unwrap(),
            "--out",
            tmp.path().join("t.csv").to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_checkpoint_error_names_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = tmp.path().join("missing.ckpt");
        let cli = Cli::try_parse_from([
            "pathode",
            "simulate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            tmp.path().to_str().unwrap(),
            "--out",
            tmp.path().join("t.csv").to_str().unwrap(),
        ])
        .unwrap();
        let err = run(cli).unwrap_err();
        assert!(err.to_string().contains("missing.ckpt"), "{err}");
        assert_eq!(err.kind(), "CheckpointError");
    }

    #[test]
    fn config_file_and_overrides_merge() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_path = tmp.path().join("cfg.json");
        fs::write(&cfg_path, r#"{"seed": 5, "lambdas": [0.5]}"#).unwrap();
        let common = CommonOpts {
            config: Some(cfg_path),
            seed: Some(9),
            ..CommonOpts::default()
        };
        let cfg = effective_config(&common).unwrap();
        assert_eq!(cfg.seed, 9); // flag wins
        assert_eq!(cfg.lambdas, vec![0.5]); // file survives
    }

    #[test]
    fn train_method_flag_overrides_config() {
        let common = CommonOpts {
            train_method: Some("dopri8".into()),
            ..CommonOpts::default()
        };
        let cfg = effective_config(&common).unwrap();
        assert_eq!(cfg.train_solve.method, Method::Dopri8);
        let common = CommonOpts {
            train_method: Some("nonsense".into()),
            ..CommonOpts::default()
        };
        assert!(effective_config(&common).is_err());
    }

    #[test]
    fn bad_config_json_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_path = tmp.path().join("cfg.json");
        fs::write(&cfg_path, "{nonsense").unwrap();
        let common = CommonOpts {
            config: Some(cfg_path),
            ..CommonOpts::default()
        };
        let err = effective_config(&common).unwrap_err();
        assert_eq!(err.kind(), "ConfigError");
    }
}
