//! Experiment orchestration: train the neural field on the training strains,
//! evaluate on the held-out strain, sweep the regularization strength, and
//! emit reports plus SVG/CSV artifacts.

pub mod svg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adiff::{Tape, Tensor};
use crate::dataio::{
    build_dataset, load_csv, BuildOptions, DataError, Dataset, FeatureSchema, InterpMode, Pathway,
};
use crate::field::{FieldError, FieldParams, FieldSpec, TapedField};
use crate::loss::{batch_trajectory_loss, LossConfig, LossError, LossFeatures, ObsBlock, PirSpace};
use crate::odeint::{
    solve, solve_taped, solve_taped_adaptive, Method, OdeError, SolveOptions, TapedTrajectory,
    TimeGrid, Trajectory,
};
use crate::optim::{two_stage_fit, AdamConfig, FitResult, LbfgsConfig, OptimError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("{0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Data(e) => e.kind(),
            HarnessError::Field(_) => "CheckpointError",
            HarnessError::Ode(OdeError::Stiffness { .. }) => "StiffnessError",
            HarnessError::Ode(_) => "NumericalError",
            HarnessError::Optim(_) => "NumericalError",
            HarnessError::Loss(_) => "ConfigError",
            HarnessError::Training(_) => "NumericalError",
            HarnessError::Config(_) => "ConfigError",
            HarnessError::Io(_) => "IoError",
            HarnessError::Json(_) => "ConfigError",
        }
    }
}

fn default_lambdas() -> Vec<f64> {
    vec![0.01, 1.0, 1000.0]
}

fn default_seed() -> u64 {
    42
}

fn default_n_points() -> usize {
    200
}

fn default_jobs() -> usize {
    1
}

fn default_slice_grid() -> usize {
    25
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            hidden_dim: 10,
            hidden_layers: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSolveConfig {
    pub method: Method,
    pub substeps: usize,
}

impl Default for TrainSolveConfig {
    fn default() -> Self {
        TrainSolveConfig {
            method: Method::Rk4Fixed,
            substeps: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSolveConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for EvalSolveConfig {
    fn default() -> Self {
        EvalSolveConfig {
            rtol: 1e-7,
            atol: 1e-9,
            max_steps: 1_000_000,
        }
    }
}

impl EvalSolveConfig {
    pub fn to_options(self) -> SolveOptions {
        SolveOptions {
            method: Method::Dopri8,
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
            initial_step: None,
            substeps: 1,
        }
    }
}

/// Full experiment description; flag overrides land here before anything
/// runs, and the effective value is echoed into the output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub pathway: Option<String>,
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub field: FieldConfig,
    pub train_solve: TrainSolveConfig,
    pub eval_solve: EvalSolveConfig,
    pub lambdas: Vec<f64>,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
    pub loss_features: LossFeatures,
    pub pir_space: PirSpace,
    /// One-step-ahead (per-row) training instead of whole-trajectory
    /// matching; experimental.
    pub per_point: bool,
    pub seed: u64,
    pub test_strain: Option<String>,
    pub interpolation: InterpMode,
    pub n_points: usize,
    pub jobs: usize,
    /// Feature pair for the vector-field slice; defaults to the first two
    /// state features.
    pub slice_features: Option<(String, String)>,
    pub slice_grid: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pathway: None,
            dataset: None,
            output_dir: default_output_dir(),
            field: FieldConfig::default(),
            train_solve: TrainSolveConfig::default(),
            eval_solve: EvalSolveConfig::default(),
            lambdas: default_lambdas(),
            adam: AdamConfig::default(),
            lbfgs: LbfgsConfig::default(),
            loss_features: LossFeatures::default(),
            pir_space: PirSpace::default(),
            per_point: false,
            seed: default_seed(),
            test_strain: None,
            interpolation: InterpMode::default(),
            n_points: default_n_points(),
            jobs: default_jobs(),
            slice_features: None,
            slice_grid: default_slice_grid(),
        }
    }
}

impl ExperimentConfig {
    pub fn pathway_enum(&self) -> Result<Option<Pathway>, DataError> {
        self.pathway.as_deref().map(Pathway::parse).transpose()
    }

    /// SHA-256 of the serialized effective config.
    pub fn checksum(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.lambdas.is_empty() {
            return Err(HarnessError::Config("lambda list must be non-empty".into()));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(HarnessError::Config(
                "lambda values must be finite and >= 0".into(),
            ));
        }
        if self.jobs == 0 {
            return Err(HarnessError::Config("jobs must be >= 1".into()));
        }
        if self.slice_grid < 2 {
            return Err(HarnessError::Config("slice_grid must be >= 2".into()));
        }
        Ok(())
    }
}

/// Load the dataset named by the config: a cache directory (containing
/// `dataset.json`) or a raw CSV file.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| HarnessError::Config("no dataset path configured".into()))?;
    if path.is_dir() {
        return Ok(Dataset::load_cache(path)?);
    }
    let pathway = cfg
        .pathway_enum()?
        .ok_or_else(|| HarnessError::Config("raw CSV ingestion needs a pathway".into()))?;
    let schema = FeatureSchema::for_pathway(pathway);
    let raw = load_csv(path, &schema)?;
    for w in &raw.warnings {
        eprintln!("warning: {w}");
    }
    let ds = build_dataset(
        &raw,
        &BuildOptions {
            n_points: cfg.n_points,
            interpolation: cfg.interpolation,
            test_strain: cfg.test_strain.clone(),
        },
    )?;
    Ok(ds)
}

/// Reference RMSE of the AutoML baseline pipeline on the held-out strain,
/// used only for the %-improvement column; these are fixed constants, never
/// recomputed here.
pub mod baselines {
    use crate::dataio::Pathway;

    pub const LIMONENE: [(&str, f64); 13] = [
        ("Acetyl-CoA", 0.34),
        ("HMG-CoA", 0.02),
        ("Mevalonate", 1.07),
        ("Mev-P", 3.64),
        ("IPP/DMAPP", 75.43),
        ("Limonene", 0.30),
        ("OD600", 4.30),
        ("GPP", 0.07),
        ("NAD", 1.50),
        ("NADP", 1.26),
        ("Acetate", 1.89),
        ("Pyruvate", 0.14),
        ("Citrate", 0.23),
    ];
    pub const LIMONENE_MEAN: f64 = 6.94;

    pub const ISOPENTENOL: [(&str, f64); 13] = [
        ("Acetyl-CoA", 9.02),
        ("HMG-CoA", 0.08),
        ("Mevalonate", 2.55),
        ("Mev-P", 126.19),
        ("IPP/DMAPP", 33.77),
        ("OD600", 2.13),
        ("GPP", 0.00),
        ("NAD", 1.96),
        ("NADP", 0.24),
        ("Acetate", 0.45),
        ("Pyruvate", 0.06),
        ("Citrate", 0.29),
        ("Isopentenol", 0.32),
    ];
    pub const ISOPENTENOL_MEAN: f64 = 13.62;

    pub fn for_pathway(p: Pathway) -> (&'static [(&'static str, f64)], f64) {
        match p {
            Pathway::Limonene => (&LIMONENE, LIMONENE_MEAN),
            Pathway::Isopentenol => (&ISOPENTENOL, ISOPENTENOL_MEAN),
        }
    }

    pub fn lookup(p: Pathway, feature: &str) -> Option<f64> {
        for_pathway(p)
            .0
            .iter()
            .find(|(name, _)| *name == feature)
            .map(|(_, v)| *v)
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    pub train_s: f64,
    pub infer_s: f64,
}

/// Held-out-strain evaluation summary. RMSE values are in the space named by
/// `rmse_space`; the listed features are the state features, and `mean_rmse`
/// is their arithmetic mean.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub pathway: Option<String>,
    pub lambda: f64,
    pub seed: u64,
    pub test_strain: String,
    pub rmse_space: String,
    pub per_feature_rmse: BTreeMap<String, f64>,
    pub mean_rmse: f64,
    pub baseline_mean_rmse: Option<f64>,
    pub pct_improvement: Option<f64>,
    pub timings: Timings,
    pub config_checksum: String,
}

/// Value-and-gradient callback handed to the optimizers.
pub trait Objective: FnMut(&[f64]) -> Result<(f64, Vec<f64>), OptimError> {}
impl<T: FnMut(&[f64]) -> Result<(f64, Vec<f64>), OptimError>> Objective for T {}

pub struct TrainedModel {
    pub params: FieldParams,
    pub fit: FitResult,
    pub lambda: f64,
    pub seed: u64,
}

/// Documented per-trial seed derivation: splitmix64 over the master seed
/// mixed with the lambda bits and the trial index.
pub fn derive_trial_seed(master: u64, lambda: f64, index: usize) -> u64 {
    splitmix64(master ^ lambda.to_bits() ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Full-batch objective over the training strains: integrate each strain
/// from its initial row, compare against the observed series, and
/// backpropagate through the solver arithmetic.
fn training_objective<'a>(
    cfg: &'a ExperimentConfig,
    ds: &'a Dataset,
    spec: FieldSpec,
    lambda: f64,
) -> Result<impl Objective + 'a, HarnessError> {
    let dim = ds.dim();
    let grid = ds.grid.clone();
    let ctx = ds.loss_context();
    let loss_cfg = LossConfig {
        lambda,
        features: cfg.loss_features,
        pir_space: cfg.pir_space,
    };
    let train_ids = ds.split.train.clone();
    let mut obs: Vec<Vec<f64>> = Vec::with_capacity(train_ids.len());
    for id in &train_ids {
        obs.push(ds.strain(id)?.to_vec());
    }
    let train_opts = SolveOptions {
        method: cfg.train_solve.method,
        substeps: cfg.train_solve.substeps,
        ..cfg.eval_solve.to_options()
    };
    let per_point = cfg.per_point;
    let n_points = ds.n_points();

    Ok(move |theta: &[f64]| {
        let params = FieldParams::from_theta(spec, theta.to_vec())
            .map_err(|e| OptimError::Objective(e.to_string()))?;
        let mut tape = Tape::new();
        let field = TapedField::bind(&mut tape, &params)
            .map_err(|e| OptimError::Objective(e.to_string()))?;

        let mut preds: Vec<TapedTrajectory> = Vec::with_capacity(obs.len());
        let mut blocks: Vec<ObsBlock<'_>> = Vec::with_capacity(obs.len());
        for ob in &obs {
            if per_point {
                // One-step-ahead: advance each observed row to the next grid
                // time and compare with the next observed row.
                let mut rows = Vec::with_capacity(n_points - 1);
                for r in 0..n_points - 1 {
                    let u = tape
                        .leaf(Tensor::col(ob[r * dim..(r + 1) * dim].to_vec()), false)
                        .map_err(|e| OptimError::Objective(e.to_string()))?;
                    let pair = TimeGrid::from_times(vec![grid.times()[r], grid.times()[r + 1]])
                        .map_err(|e| OptimError::Objective(e.to_string()))?;
                    let t = solve_step(&params, &field, &mut tape, u, &pair, &train_opts)
                        .map_err(|e| OptimError::Objective(e.to_string()))?;
                    rows.push(t.rows[1]);
                }
                preds.push(TapedTrajectory {
                    rows,
                    stats: Default::default(),
                });
                blocks.push(ObsBlock::new(&ob[dim..], n_points - 1, dim));
            } else {
                let u0 = tape
                    .leaf(Tensor::col(ob[..dim].to_vec()), false)
                    .map_err(|e| OptimError::Objective(e.to_string()))?;
                let traj = solve_step(&params, &field, &mut tape, u0, &grid, &train_opts)
                    .map_err(|e| OptimError::Objective(e.to_string()))?;
                preds.push(traj);
                blocks.push(ObsBlock::new(ob, n_points, dim));
            }
        }

        let pred_refs: Vec<&TapedTrajectory> = preds.iter().collect();
        let value = batch_trajectory_loss(&mut tape, &pred_refs, &blocks, &loss_cfg, &ctx)
            .map_err(|e| OptimError::Objective(e.to_string()))?;
        let grads = tape
            .backward(value.total)
            .map_err(|e| OptimError::Objective(e.to_string()))?;
        Ok((value.total_value, field.flatten_grads(&grads)))
    })
}

fn solve_step(
    params: &FieldParams,
    field: &TapedField,
    tape: &mut Tape,
    u0: crate::adiff::Var,
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<TapedTrajectory, OdeError> {
    match opts.method {
        Method::Rk4Fixed => solve_taped(field, tape, u0, grid, opts),
        Method::Dopri8 => solve_taped_adaptive(params, field, tape, u0, grid, opts),
    }
}

/// Fit the field on the training strains with the two-stage schedule. Solver
/// blow-ups abort the trial with diagnostics.
pub fn train(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    lambda: f64,
    seed: u64,
) -> Result<TrainedModel, HarnessError> {
    cfg.validate()?;
    let spec = FieldSpec::new(ds.dim(), cfg.field.hidden_dim, cfg.field.hidden_layers)?;
    let theta0 = FieldParams::init(spec, seed);
    let mut objective = training_objective(cfg, ds, spec, lambda)?;
    let fit = two_stage_fit(&mut objective, &theta0.theta, &cfg.adam, &cfg.lbfgs)?;
    if let Some(failure) = &fit.failure {
        return Err(HarnessError::Training(failure.clone()));
    }
    let params = FieldParams::from_theta(spec, fit.theta.clone())?;
    Ok(TrainedModel {
        params,
        fit,
        lambda,
        seed,
    })
}

/// Inference-grade solve from `u0` with wall-clock measurement.
pub fn simulate(
    params: &FieldParams,
    u0: &[f64],
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<(Trajectory, f64), HarnessError> {
    let start = Instant::now();
    let traj = solve(params, u0, grid, opts)?;
    Ok((traj, start.elapsed().as_secs_f64()))
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub predicted: Trajectory,
    pub observed: Trajectory,
}

/// Simulate the held-out strain from its initial state and score per-feature
/// RMSE over the full grid (normalized space).
pub fn evaluate(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    params: &FieldParams,
    lambda: f64,
    seed: u64,
    train_s: f64,
) -> Result<EvalOutcome, HarnessError> {
    let test_id = ds.split.test.clone();
    let obs = ds.strain(&test_id)?;
    let dim = ds.dim();
    let (pred, infer_s) = simulate(params, &obs[..dim], &ds.grid, &cfg.eval_solve.to_options())?;

    let n = ds.n_points();
    let rmse_all: Vec<f64> = (0..dim)
        .map(|j| {
            let mse = (0..n)
                .map(|r| {
                    let d = pred.row(r)[j] - obs[r * dim + j];
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            mse.sqrt()
        })
        .collect();

    let state_idx = ds.state_indices();
    let mut per_feature = BTreeMap::new();
    for &j in &state_idx {
        per_feature.insert(ds.feature_names[j].clone(), rmse_all[j]);
    }
    let mean_rmse = state_idx.iter().map(|&j| rmse_all[j]).sum::<f64>() / state_idx.len() as f64;

    // %-improvement only when the state set matches the embedded baseline.
    let (baseline_mean_rmse, pct_improvement) = match ds.pathway {
        Some(p) => {
            let (table, mean) = baselines::for_pathway(p);
            let names: Vec<&str> = state_idx
                .iter()
                .map(|&j| ds.feature_names[j].as_str())
                .collect();
            let matches =
                table.len() == names.len() && table.iter().all(|(n, _)| names.contains(n));
            if matches {
                (Some(mean), Some(100.0 * (mean - mean_rmse) / mean))
            } else {
                (None, None)
            }
        }
        None => (None, None),
    };

    let observed = Trajectory::from_matrix(ds.grid.clone(), dim, obs.to_vec());
    let report = MetricsReport {
        schema_version: 1,
        pathway: ds.pathway.map(|p| p.name().to_string()),
        lambda,
        seed,
        test_strain: test_id,
        rmse_space: "normalized_zscore".into(),
        per_feature_rmse: per_feature,
        mean_rmse,
        baseline_mean_rmse,
        pct_improvement,
        timings: Timings { train_s, infer_s },
        config_checksum: cfg.checksum(),
    };
    Ok(EvalOutcome {
        report,
        predicted: pred,
        observed,
    })
}

/// Trajectory CSV: `time` column then one column per feature.
pub fn write_trajectory_csv(
    path: &Path,
    traj: &Trajectory,
    feature_names: &[String],
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(DataError::from)?;
    let mut header = vec!["time".to_string()];
    header.extend(feature_names.iter().cloned());
    w.write_record(&header).map_err(DataError::from)?;
    for (i, &t) in traj.grid.times().iter().enumerate() {
        let mut rec = vec![format!("{t}")];
        rec.extend(traj.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(DataError::from)?;
    }
    w.flush()?;
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Text table mirroring the per-feature RMSE report layout.
pub fn render_report_table(report: &MetricsReport, ds_pathway: Option<Pathway>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Held-out strain {} | lambda = {} | RMSE space: {}",
        report.test_strain, report.lambda, report.rmse_space
    );
    let _ = writeln!(out, "{:<18} {:>10} {:>10}", "Feature", "NODE", "Baseline");
    for (name, rmse) in &report.per_feature_rmse {
        let base = ds_pathway
            .and_then(|p| baselines::lookup(p, name))
            .map(|b| format!("{b:>10.2}"))
            .unwrap_or_else(|| format!("{:>10}", "--"));
        let _ = writeln!(out, "{name:<18} {rmse:>10.2} {base}");
    }
    let _ = writeln!(
        out,
        "{:<18} {:>10.2} {}",
        "Mean RMSE",
        report.mean_rmse,
        report
            .baseline_mean_rmse
            .map(|b| format!("{b:>10.2}"))
            .unwrap_or_else(|| format!("{:>10}", "--"))
    );
    if let Some(imp) = report.pct_improvement {
        let _ = writeln!(out, "{:<18} {imp:>10.2}", "% Improvement");
    }
    let _ = writeln!(
        out,
        "Timings: train {:.2} s ({:.2} min), inference {:.4} s ({:.4} min)",
        report.timings.train_s,
        report.timings.train_s / 60.0,
        report.timings.infer_s,
        report.timings.infer_s / 60.0
    );
    out
}

/// Write the evaluation artifacts: per-feature overlay SVGs, the
/// vector-field slice (CSV + SVG), trajectory CSVs, and the report (JSON +
/// text table).
pub fn emit_artifacts(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    params: &FieldParams,
    outcome: &EvalOutcome,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    // Report JSON + text.
    let report_json = dir.join("report.json");
    fs::write(&report_json, serde_json::to_string_pretty(&outcome.report)?)?;
    written.push(report_json);
    let report_txt = dir.join("report.txt");
    fs::write(
        &report_txt,
        render_report_table(&outcome.report, ds.pathway),
    )?;
    written.push(report_txt);

    // Trajectory CSV exports.
    let pred_csv = dir.join("predicted.csv");
    write_trajectory_csv(&pred_csv, &outcome.predicted, &ds.feature_names)?;
    written.push(pred_csv);
    let obs_csv = dir.join("observed.csv");
    write_trajectory_csv(&obs_csv, &outcome.observed, &ds.feature_names)?;
    written.push(obs_csv);

    // Per-feature overlays.
    let times = ds.grid.times();
    for (j, name) in ds.feature_names.iter().enumerate() {
        let obs_pts: Vec<(f64, f64)> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, outcome.observed.row(i)[j]))
            .collect();
        let pred_pts: Vec<(f64, f64)> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, outcome.predicted.row(i)[j]))
            .collect();
        let svg_text = svg::line_chart(
            &format!("{name} — held-out strain {}", outcome.report.test_strain),
            "time (normalized)",
            "value (normalized)",
            &[
                svg::Series {
                    label: "observed",
                    color: "#2b6cb0",
                    dashed: false,
                    points: &obs_pts,
                },
                svg::Series {
                    label: "predicted",
                    color: "#c53030",
                    dashed: true,
                    points: &pred_pts,
                },
            ],
        );
        let path = dir.join(format!("traj_{}.svg", sanitize(name)));
        fs::write(&path, svg_text)?;
        written.push(path);
    }

    // Vector-field slice.
    let (fi, fj) = slice_pair(cfg, ds)?;
    let (csv_path, svg_path) = write_field_slice(cfg, ds, params, outcome, fi, fj, dir)?;
    written.push(csv_path);
    written.push(svg_path);

    Ok(written)
}

fn slice_pair(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(usize, usize), HarnessError> {
    match &cfg.slice_features {
        Some((a, b)) => {
            let fi = ds
                .feature_names
                .iter()
                .position(|n| n == a)
                .ok_or_else(|| HarnessError::Config(format!("slice feature '{a}' not found")))?;
            let fj = ds
                .feature_names
                .iter()
                .position(|n| n == b)
                .ok_or_else(|| HarnessError::Config(format!("slice feature '{b}' not found")))?;
            if fi == fj {
                return Err(HarnessError::Config(
                    "slice features must be distinct".into(),
                ));
            }
            Ok((fi, fj))
        }
        None => {
            let states = ds.state_indices();
            if states.len() >= 2 {
                Ok((states[0], states[1]))
            } else if ds.dim() >= 2 {
                Ok((0, 1))
            } else {
                Err(HarnessError::Config(
                    "need at least two features for a field slice".into(),
                ))
            }
        }
    }
}

/// Sample the learned field on a G x G grid over two features, all other
/// coordinates clamped at the predicted trajectory's means.
fn write_field_slice(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    params: &FieldParams,
    outcome: &EvalOutcome,
    fi: usize,
    fj: usize,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), HarnessError> {
    let dim = ds.dim();
    let g = cfg.slice_grid;
    let pred = &outcome.predicted;
    let n = pred.len();

    let mut means = vec![0.0; dim];
    for r in 0..n {
        for (acc, v) in means.iter_mut().zip(pred.row(r)) {
            *acc += v;
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }

    let range = |j: usize| -> (f64, f64) {
        let col = pred.column(j);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.1 * (hi - lo).max(1e-6);
        (lo - pad, hi + pad)
    };
    let (xi0, xi1) = range(fi);
    let (xj0, xj1) = range(fj);

    let name_i = &ds.feature_names[fi];
    let name_j = &ds.feature_names[fj];
    let csv_path = dir.join(format!(
        "field_slice_{}__{}.csv",
        sanitize(name_i),
        sanitize(name_j)
    ));
    let mut w = csv::Writer::from_path(&csv_path).map_err(DataError::from)?;
    w.write_record([
        name_i.as_str(),
        name_j.as_str(),
        &format!("d{name_i}_dt"),
        &format!("d{name_j}_dt"),
    ])
    .map_err(DataError::from)?;

    let mut cells = Vec::with_capacity(g * g);
    let mut u = means.clone();
    let mut du = vec![0.0; dim];
    for a in 0..g {
        let x = xi0 + (xi1 - xi0) * a as f64 / (g - 1) as f64;
        for b in 0..g {
            let y = xj0 + (xj1 - xj0) * b as f64 / (g - 1) as f64;
            u[fi] = x;
            u[fj] = y;
            params.eval(&u, &mut du)?;
            w.write_record([
                format!("{x}"),
                format!("{y}"),
                format!("{}", du[fi]),
                format!("{}", du[fj]),
            ])
            .map_err(DataError::from)?;
            cells.push(svg::QuiverCell {
                x,
                y,
                dx: du[fi],
                dy: du[fj],
            });
        }
    }
    w.flush()?;

    let svg_path = dir.join(format!(
        "field_slice_{}__{}.svg",
        sanitize(name_i),
        sanitize(name_j)
    ));
    let svg_text = svg::quiver_heat(
        &format!("learned field: d({name_i}, {name_j})/dt"),
        name_i,
        name_j,
        g,
        &cells,
    );
    fs::write(&svg_path, svg_text)?;
    Ok((csv_path, svg_path))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub lambda: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub mean_rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub pathway: Option<String>,
    pub lambdas: Vec<f64>,
    pub best_lambda: Option<f64>,
    pub trials: Vec<TrialRecord>,
}

pub struct SweepOutcome {
    pub summary: SweepSummary,
    pub reports: Vec<Option<MetricsReport>>,
}

/// One full trial: train, checkpoint, evaluate, artifacts.
pub fn run_trial(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    lambda: f64,
    seed: u64,
    dir: &Path,
) -> Result<MetricsReport, HarnessError> {
    fs::create_dir_all(dir)?;
    let start = Instant::now();
    let model = train(cfg, ds, lambda, seed)?;
    let train_s = start.elapsed().as_secs_f64();

    model
        .params
        .save_checkpoint(&dir.join("checkpoint.ckpt"), seed)?;
    fs::write(
        dir.join("fit.json"),
        serde_json::to_string_pretty(&model.fit)?,
    )?;

    let outcome = evaluate(cfg, ds, &model.params, lambda, seed, train_s)?;
    emit_artifacts(cfg, ds, &model.params, &outcome, dir)?;
    Ok(outcome.report)
}

/// Independent trials over the lambda list, each with a derived seed and its
/// own output directory. Individual failures are recorded and the sweep
/// continues.
pub fn sweep(cfg: &ExperimentConfig, ds: &Dataset) -> Result<SweepOutcome, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;

    let trials: Vec<(usize, f64, u64, PathBuf)> = cfg
        .lambdas
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let seed = derive_trial_seed(cfg.seed, lambda, i);
            let dir = cfg
                .output_dir
                .join(format!("lambda_{}", fmt_lambda(lambda)));
            (i, lambda, seed, dir)
        })
        .collect();

    let mut results: Vec<Option<Result<MetricsReport, HarnessError>>> =
        (0..trials.len()).map(|_| None).collect();

    let jobs = cfg.jobs.min(trials.len()).max(1);
    if jobs == 1 {
        for (i, lambda, seed, dir) in &trials {
            results[*i] = Some(run_trial(cfg, ds, *lambda, *seed, dir));
        }
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in trials.chunks(trials.len().div_ceil(jobs)) {
                handles.push(scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|(i, lambda, seed, dir)| (*i, run_trial(cfg, ds, *lambda, *seed, dir)))
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                for (i, r) in h.join().expect("sweep worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }

    let mut records = Vec::new();
    let mut reports = Vec::new();
    for ((_, lambda, seed, dir), result) in trials.iter().zip(results) {
        match result.unwrap() {
            Ok(report) => {
                records.push(TrialRecord {
                    lambda: *lambda,
                    seed: *seed,
                    dir: dir.clone(),
                    mean_rmse: Some(report.mean_rmse),
                    error: None,
                });
                reports.push(Some(report));
            }
            Err(e) => {
                records.push(TrialRecord {
                    lambda: *lambda,
                    seed: *seed,
                    dir: dir.clone(),
                    mean_rmse: None,
                    error: Some(format!("{} ({})", e, e.kind())),
                });
                reports.push(None);
            }
        }
    }

    let best_lambda = records
        .iter()
        .filter_map(|r| r.mean_rmse.map(|m| (r.lambda, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(l, _)| l);

    let summary = SweepSummary {
        schema_version: 1,
        pathway: ds.pathway.map(|p| p.name().to_string()),
        lambdas: cfg.lambdas.clone(),
        best_lambda,
        trials: records,
    };

    fs::write(
        cfg.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let table = render_sweep_table(ds, &summary, &reports);
    fs::write(cfg.output_dir.join("summary.txt"), &table)?;

    Ok(SweepOutcome { summary, reports })
}

fn fmt_lambda(lambda: f64) -> String {
    format!("{lambda:.2}").replace('.', "_")
}

/// Sweep summary table: one column per lambda (2-decimal headers) plus the
/// baseline column.
pub fn render_sweep_table(
    ds: &Dataset,
    summary: &SweepSummary,
    reports: &[Option<MetricsReport>],
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Pathway: {} | test strain: {} | RMSE space: normalized_zscore",
        summary.pathway.as_deref().unwrap_or("custom"),
        ds.split.test
    );
    let _ = write!(out, "{:<18}", "Feature");
    for l in &summary.lambdas {
        let _ = write!(out, " {:>10}", format!("{l:.2}"));
    }
    let _ = writeln!(out, " {:>10}", "Baseline");

    let state_idx = ds.state_indices();
    for &j in &state_idx {
        let name = &ds.feature_names[j];
        let _ = write!(out, "{name:<18}");
        for r in reports {
            match r.as_ref().and_then(|r| r.per_feature_rmse.get(name)) {
                Some(v) => {
                    let _ = write!(out, " {v:>10.2}");
                }
                None => {
                    let _ = write!(out, " {:>10}", "--");
                }
            }
        }
        let base = ds
            .pathway
            .and_then(|p| baselines::lookup(p, name))
            .map(|b| format!("{b:>10.2}"))
            .unwrap_or_else(|| format!("{:>10}", "--"));
        let _ = writeln!(out, " {base}");
    }

    let _ = write!(out, "{:<18}", "Mean RMSE");
    for r in reports {
        match r {
            Some(r) => {
                let _ = write!(out, " {:>10.2}", r.mean_rmse);
            }
            None => {
                let _ = write!(out, " {:>10}", "--");
            }
        }
    }
    let base_mean = ds
        .pathway
        .map(|p| format!("{:>10.2}", baselines::for_pathway(p).1))
        .unwrap_or_else(|| format!("{:>10}", "--"));
    let _ = writeln!(out, " {base_mean}");

    let _ = write!(out, "{:<18}", "% Improvement");
    for r in reports {
        match r.as_ref().and_then(|r| r.pct_improvement) {
            Some(v) => {
                let _ = write!(out, " {v:>10.2}");
            }
            None => {
                let _ = write!(out, " {:>10}", "--");
            }
        }
    }
    let _ = writeln!(out, " {:>10}", "--");

    for t in &summary.trials {
        if let Some(err) = &t.error {
            let _ = writeln!(out, "trial lambda={}: FAILED: {err}", t.lambda);
        }
    }
    if let Some(best) = summary.best_lambda {
        let _ = writeln!(out, "Best lambda by mean RMSE: {best}");
    }
    out
}

/// Echo the effective config and tool version into the run directory.
pub fn write_run_metadata(cfg: &ExperimentConfig, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("effective_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    fs::write(
        dir.join("tool_version.txt"),
        format!("pathode {}\n", env!("CARGO_PKG_VERSION")),
    )?;
    Ok(())
}

/// Synthetic dataset straight from analytic dynamics: integrate the given
/// field tightly from several initial conditions and package the (already
/// normalized-scale) samples as strains.
pub fn dataset_from_dynamics<F: crate::odeint::VectorField>(
    truth: &F,
    initial_conditions: &[(String, Vec<f64>)],
    feature_names: Vec<String>,
    n_points: usize,
    test_strain: &str,
    normalize: bool,
) -> Result<Dataset, HarnessError> {
    use crate::dataio::{resolve_split, NormStats, Split};

    let grid = TimeGrid::uniform(0.0, 1.0, n_points)?;
    let opts = SolveOptions {
        rtol: 1e-10,
        atol: 1e-12,
        ..SolveOptions::default()
    };
    let dim = feature_names.len();
    let mut matrices = Vec::new();
    for (id, u0) in initial_conditions {
        let traj = solve(truth, u0, &grid, &opts)?;
        matrices.push((id.clone(), traj.values().to_vec()));
    }

    let ids: Vec<String> = matrices.iter().map(|(id, _)| id.clone()).collect();
    let split: Split = resolve_split(&ids, None, Some(test_strain))?;

    let norm = if normalize {
        let train_views: Vec<&[f64]> = matrices
            .iter()
            .filter(|(id, _)| split.train.contains(id))
            .map(|(_, m)| m.as_slice())
            .collect();
        NormStats::compute(&train_views, dim)
    } else {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            zero_variance: vec![false; dim],
        }
    };
    let strains = matrices
        .into_iter()
        .map(|(id, mut m)| {
            norm.normalize(&mut m);
            (id, m)
        })
        .collect();

    Ok(Dataset::from_normalized_parts(
        None,
        grid,
        feature_names,
        vec![true; dim],
        norm,
        split,
        strains,
    ))
}
