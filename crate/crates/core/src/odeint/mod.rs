//! Numerical integration of `du/dt = f(u)`: a differentiable fixed-step RK4
//! for training and an adaptive 13-stage Dormand-Prince 8(7) for
//! inference-grade solves. Both produce solutions on an arbitrary output
//! grid; adaptive steps are clamped to land exactly on requested times.

pub mod tableau;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adiff::{AdiffError, Tape, Var};
use crate::field::{FieldError, FieldParams, TapedField};

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid solve options: {0}")]
    InvalidOptions(String),
    #[error("state dimension {got} does not match field dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("step budget of {max_steps} exhausted at t = {t_reached} (stiffness guard)")]
    Stiffness { t_reached: f64, max_steps: usize },
    #[error("non-finite state encountered at t = {t}")]
    Numerical { t: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Adiff(#[from] AdiffError),
}

/// Strictly increasing output times, with an optional affine map back to
/// physical hours (`hours = offset + scale * t`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    pub hours: Option<TimeAffine>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAffine {
    pub offset: f64,
    pub scale: f64,
}

impl TimeGrid {
    pub fn from_times(times: Vec<f64>) -> Result<Self, OdeError> {
        if times.is_empty() {
            return Err(OdeError::InvalidGrid("grid must be non-empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(OdeError::InvalidGrid("grid times must be finite".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(OdeError::InvalidGrid(
                "grid times must be strictly increasing".into(),
            ));
        }
        Ok(TimeGrid { times, hours: None })
    }

    /// `n` uniformly spaced points on `[t0, t1]`; the endpoints are hit
    /// exactly.
    pub fn uniform(t0: f64, t1: f64, n: usize) -> Result<Self, OdeError> {
        if n == 0 {
            return Err(OdeError::InvalidGrid("grid must be non-empty".into()));
        }
        if n == 1 {
            return TimeGrid::from_times(vec![t0]);
        }
        if t1 <= t0 {
            return Err(OdeError::InvalidGrid(format!(
                "need t1 > t0, got [{t0}, {t1}]"
            )));
        }
        let step = (t1 - t0) / (n - 1) as f64;
        let mut times: Vec<f64> = (0..n).map(|i| t0 + i as f64 * step).collect();
        times[n - 1] = t1;
        TimeGrid::from_times(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.times[0]
    }

    pub fn last(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn with_hours(mut self, offset: f64, scale: f64) -> Self {
        self.hours = Some(TimeAffine { offset, scale });
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4Fixed,
    Dopri8,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolveOptions {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub initial_step: Option<f64>,
    /// RK4 substeps per grid interval.
    pub substeps: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            method: Method::Dopri8,
            rtol: 1e-7,
            atol: 1e-9,
            max_steps: 1_000_000,
            initial_step: None,
            substeps: 1,
        }
    }
}

impl SolveOptions {
    pub fn rk4(substeps: usize) -> Self {
        SolveOptions {
            method: Method::Rk4Fixed,
            substeps,
            ..SolveOptions::default()
        }
    }

    fn validate(&self) -> Result<(), OdeError> {
        if !(self.rtol.is_finite() && self.rtol > 0.0 && self.atol.is_finite() && self.atol > 0.0) {
            return Err(OdeError::InvalidOptions(format!(
                "tolerances must be positive, got rtol={} atol={}",
                self.rtol, self.atol
            )));
        }
        if self.max_steps == 0 {
            return Err(OdeError::InvalidOptions("max_steps must be >= 1".into()));
        }
        if self.substeps == 0 {
            return Err(OdeError::InvalidOptions("substeps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub field_evals: usize,
}

/// Solution sampled on a [`TimeGrid`]: a `T x D` matrix whose first row is
/// the initial state, bit for bit.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    pub stats: SolveStats,
}

impl Trajectory {
    pub fn from_rows(grid: TimeGrid, dim: usize, rows: Vec<Vec<f64>>, stats: SolveStats) -> Self {
        debug_assert_eq!(rows.len(), grid.len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            debug_assert_eq!(r.len(), dim);
            values.extend_from_slice(&r);
        }
        Trajectory {
            grid,
            dim,
            values,
            stats,
        }
    }

    pub fn from_matrix(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len() * dim);
        Trajectory {
            grid,
            dim,
            values,
            stats: SolveStats::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i)[j]).collect()
    }
}

/// Right-hand side of the ODE.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval_into(&self, t: f64, u: &[f64], du: &mut [f64]);
}

impl VectorField for FieldParams {
    fn dim(&self) -> usize {
        self.spec.input_dim
    }

    fn eval_into(&self, _t: f64, u: &[f64], du: &mut [f64]) {
        self.eval(u, du).expect("dimension checked by solver");
    }
}

/// Closure adapter for analytic test problems.
pub struct FnField<F: Fn(f64, &[f64], &mut [f64])> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, t: f64, u: &[f64], du: &mut [f64]) {
        (self.f)(t, u, du)
    }
}

/// Right-hand side whose evaluation is recorded on a tape.
pub trait TapedVectorField {
    fn dim(&self) -> usize;
    fn eval_var(&self, tape: &mut Tape, u: Var) -> Result<Var, OdeError>;
}

impl TapedVectorField for TapedField {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn eval_var(&self, tape: &mut Tape, u: Var) -> Result<Var, OdeError> {
        Ok(self.eval(tape, u)?)
    }
}

/// Integrate without recording. Outputs land exactly on the grid times.
pub fn solve<F: VectorField>(
    field: &F,
    u0: &[f64],
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<Trajectory, OdeError> {
    opts.validate()?;
    if u0.len() != field.dim() {
        return Err(OdeError::DimensionMismatch {
            expected: field.dim(),
            got: u0.len(),
        });
    }
    if u0.iter().any(|x| !x.is_finite()) {
        return Err(OdeError::Numerical { t: grid.first() });
    }
    match opts.method {
        Method::Rk4Fixed => rk4_fixed(field, u0, grid, opts),
        Method::Dopri8 => {
            let (traj, _plan) = dopri8_adaptive(field, u0, grid, opts)?;
            Ok(traj)
        }
    }
}

fn rk4_fixed<F: VectorField>(
    field: &F,
    u0: &[f64],
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<Trajectory, OdeError> {
    let d = field.dim();
    let mut rows = Vec::with_capacity(grid.len());
    rows.push(u0.to_vec());
    let mut u = u0.to_vec();
    let mut stats = SolveStats::default();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];

    for w in grid.times().windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let h = (t1 - t0) / opts.substeps as f64;
        for s in 0..opts.substeps {
            let t = t0 + s as f64 * h;
            field.eval_into(t, &u, &mut k1);
            for i in 0..d {
                tmp[i] = u[i] + 0.5 * h * k1[i];
            }
            field.eval_into(t + 0.5 * h, &tmp, &mut k2);
            for i in 0..d {
                tmp[i] = u[i] + 0.5 * h * k2[i];
            }
            field.eval_into(t + 0.5 * h, &tmp, &mut k3);
            for i in 0..d {
                tmp[i] = u[i] + h * k3[i];
            }
            field.eval_into(t + h, &tmp, &mut k4);
            for i in 0..d {
                u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            stats.steps_accepted += 1;
            stats.field_evals += 4;
            if u.iter().any(|x| !x.is_finite()) {
                return Err(OdeError::Numerical { t: t + h });
            }
        }
        rows.push(u.clone());
    }
    Ok(Trajectory::from_rows(grid.clone(), d, rows, stats))
}

/// Sequence of accepted adaptive steps; `rows_after[r]` is the number of
/// accepted steps taken before output row `r` is emitted.
struct StepPlan {
    steps: Vec<f64>,
    rows_after: Vec<usize>,
}

fn dopri8_adaptive<F: VectorField>(
    field: &F,
    u0: &[f64],
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<(Trajectory, StepPlan), OdeError> {
    let d = field.dim();
    let mut rows = Vec::with_capacity(grid.len());
    rows.push(u0.to_vec());
    let mut plan = StepPlan {
        steps: Vec::new(),
        rows_after: vec![0],
    };
    let mut stats = SolveStats::default();

    if grid.len() == 1 {
        return Ok((Trajectory::from_rows(grid.clone(), d, rows, stats), plan));
    }

    let t_end = grid.last();
    let mut t = grid.first();
    let mut u = u0.to_vec();
    let mut out_idx = 1usize;

    let mut ks: Vec<Vec<f64>> = (0..tableau::STAGES).map(|_| vec![0.0; d]).collect();
    let mut stage_u = vec![0.0; d];
    let mut u_new = vec![0.0; d];
    let mut err_vec = vec![0.0; d];

    let mut h = match opts.initial_step {
        Some(h0) if h0 > 0.0 => h0.min(t_end - t),
        Some(h0) => {
            return Err(OdeError::InvalidOptions(format!(
                "initial_step must be positive, got {h0}"
            )))
        }
        None => initial_step(field, t, &u, t_end, opts, &mut stats),
    };

    // PI (Lund-stabilized) step-size controller constants.
    const SAFE: f64 = 0.9;
    const FAC_MIN: f64 = 1.0 / 3.0; // max shrink per accepted step
    const FAC_MAX: f64 = 6.0; // max growth per accepted step
    const BETA: f64 = 0.02;
    let expo1 = 0.125 - BETA * 0.2;
    let mut facold: f64 = 1e-4;

    let mut attempts = 0usize;
    while out_idx < grid.len() {
        if attempts >= opts.max_steps {
            return Err(OdeError::Stiffness {
                t_reached: t,
                max_steps: opts.max_steps,
            });
        }
        attempts += 1;

        // Clamp so accepted steps land exactly on the next requested time.
        let t_next_out = grid.times()[out_idx];
        let mut h_step = h.min(t_end - t);
        let mut hit_output = false;
        if t + h_step >= t_next_out {
            h_step = t_next_out - t;
            hit_output = true;
        }
        if h_step <= f64::EPSILON * t.abs().max(1.0) {
            return Err(OdeError::Numerical { t });
        }

        dopri8_stage_sweep(field, t, &u, h_step, &mut ks, &mut stage_u);
        stats.field_evals += tableau::STAGES;

        for i in 0..d {
            let mut acc8 = 0.0;
            let mut acc_err = 0.0;
            for ((k, b8), b7) in ks.iter().zip(&tableau::B8).zip(&tableau::B7) {
                acc8 += b8 * k[i];
                acc_err += (b8 - b7) * k[i];
            }
            u_new[i] = u[i] + h_step * acc8;
            err_vec[i] = h_step * acc_err;
        }
        if u_new.iter().any(|x| !x.is_finite()) {
            return Err(OdeError::Numerical { t });
        }

        let mut err_sq = 0.0;
        for i in 0..d {
            let sc = opts.atol + opts.rtol * u[i].abs().max(u_new[i].abs());
            let e = err_vec[i] / sc;
            err_sq += e * e;
        }
        let err = (err_sq / d as f64).sqrt();
        if !err.is_finite() {
            return Err(OdeError::Numerical { t });
        }

        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            // accept; the controller mixes in the previous accepted error
            let fac = (fac11 / facold.powf(BETA) / SAFE).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            facold = err.max(1e-4);
            stats.steps_accepted += 1;
            plan.steps.push(h_step);
            std::mem::swap(&mut u, &mut u_new);
            if hit_output {
                t = t_next_out;
                rows.push(u.clone());
                plan.rows_after.push(plan.steps.len());
                out_idx += 1;
            } else {
                t += h_step;
            }
            h = h_step / fac;
        } else {
            stats.steps_rejected += 1;
            h = h_step / (fac11 / SAFE).min(1.0 / FAC_MIN);
        }
    }

    Ok((Trajectory::from_rows(grid.clone(), d, rows, stats), plan))
}

fn dopri8_stage_sweep<F: VectorField>(
    field: &F,
    t: f64,
    u: &[f64],
    h: f64,
    ks: &mut [Vec<f64>],
    stage_u: &mut [f64],
) {
    let d = u.len();
    let (k0, rest) = ks.split_at_mut(1);
    field.eval_into(t, u, &mut k0[0]);
    for s in 1..tableau::STAGES {
        for i in 0..d {
            let mut acc = 0.0;
            let row = &tableau::A[s];
            acc += row[0] * k0[0][i];
            for (j, rk) in rest[..s - 1].iter().enumerate() {
                acc += row[j + 1] * rk[i];
            }
            stage_u[i] = u[i] + h * acc;
        }
        let (done, cur) = rest.split_at_mut(s - 1);
        let _ = done;
        field.eval_into(t + tableau::C[s] * h, stage_u, &mut cur[0]);
    }
}

/// Classic automatic initial step: match the scale of `u0` and `f(u0)`, take
/// one Euler probe, then bound by the estimated second derivative with the
/// 8th-order error exponent.
fn initial_step<F: VectorField>(
    field: &F,
    t0: f64,
    u0: &[f64],
    t_end: f64,
    opts: &SolveOptions,
    stats: &mut SolveStats,
) -> f64 {
    let d = u0.len();
    let span = t_end - t0;
    let mut f0 = vec![0.0; d];
    field.eval_into(t0, u0, &mut f0);
    stats.field_evals += 1;

    let sc: Vec<f64> = u0
        .iter()
        .map(|&x| opts.atol + opts.rtol * x.abs())
        .collect();
    let d0 = rms(u0.iter().zip(&sc).map(|(x, s)| x / s));
    let d1 = rms(f0.iter().zip(&sc).map(|(x, s)| x / s));
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * (d0 / d1)
    };
    h0 = h0.min(span);

    let u1: Vec<f64> = u0.iter().zip(&f0).map(|(x, f)| x + h0 * f).collect();
    let mut f1 = vec![0.0; d];
    field.eval_into(t0 + h0, &u1, &mut f1);
    stats.field_evals += 1;
    let d2 = rms(f1.iter().zip(&f0).zip(&sc).map(|((a, b), s)| (a - b) / s)) / h0;

    let d12 = d1.max(d2);
    let h1 = if d12 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d12).powf(1.0 / 8.0)
    };
    (100.0 * h0).min(h1).min(span)
}

fn rms<I: Iterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in xs {
        sum += x * x;
        n += 1;
    }
    (sum / n as f64).sqrt()
}

/// Differentiable solution: each output row is a Var whose history reaches
/// back to the field's parameter leaves.
pub struct TapedTrajectory {
    pub rows: Vec<Var>,
    pub stats: SolveStats,
}

impl TapedTrajectory {
    /// Materialize the recorded values as a plain trajectory.
    pub fn to_trajectory(&self, tape: &Tape, grid: &TimeGrid) -> Trajectory {
        let rows: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|v| tape.value(*v).data().to_vec())
            .collect();
        let dim = rows[0].len();
        Trajectory::from_rows(grid.clone(), dim, rows, self.stats)
    }
}

/// Fixed-step RK4 with every arithmetic step recorded, so a scalar loss of
/// the trajectory is differentiable with respect to the field parameters.
pub fn solve_taped<F: TapedVectorField>(
    field: &F,
    tape: &mut Tape,
    u0: Var,
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<TapedTrajectory, OdeError> {
    opts.validate()?;
    if opts.method != Method::Rk4Fixed {
        return Err(OdeError::InvalidOptions(
            "solve_taped integrates with rk4_fixed; use solve_taped_adaptive for dopri8".into(),
        ));
    }
    check_taped_u0(field, tape, u0)?;

    let mut stats = SolveStats::default();
    let mut rows = vec![u0];
    let mut u = u0;
    for w in grid.times().windows(2) {
        let h = (w[1] - w[0]) / opts.substeps as f64;
        for s in 0..opts.substeps {
            u = rk4_step_taped(field, tape, u, h)?;
            stats.steps_accepted += 1;
            stats.field_evals += 4;
            if !tape.value(u).is_finite() {
                return Err(OdeError::Numerical {
                    t: w[0] + (s + 1) as f64 * h,
                });
            }
        }
        rows.push(u);
    }
    Ok(TapedTrajectory { rows, stats })
}

fn rk4_step_taped<F: TapedVectorField>(
    field: &F,
    tape: &mut Tape,
    u: Var,
    h: f64,
) -> Result<Var, OdeError> {
    let k1 = field.eval_var(tape, u)?;
    let u2 = add_scaled(tape, u, k1, 0.5 * h)?;
    let k2 = field.eval_var(tape, u2)?;
    let u3 = add_scaled(tape, u, k2, 0.5 * h)?;
    let k3 = field.eval_var(tape, u3)?;
    let u4 = add_scaled(tape, u, k3, h)?;
    let k4 = field.eval_var(tape, u4)?;

    let k2x2 = tape.scale(k2, 2.0)?;
    let k3x2 = tape.scale(k3, 2.0)?;
    let s12 = tape.add(k1, k2x2)?;
    let s34 = tape.add(k3x2, k4)?;
    let ksum = tape.add(s12, s34)?;
    add_scaled(tape, u, ksum, h / 6.0)
}

fn add_scaled(tape: &mut Tape, base: Var, delta: Var, factor: f64) -> Result<Var, OdeError> {
    let scaled = tape.scale(delta, factor)?;
    Ok(tape.add(base, scaled)?)
}

/// Adaptive Dormand-Prince 8(7) with gradients: the step sequence is chosen
/// by an untaped solve, then those accepted steps are replayed on the tape
/// with the controller decisions frozen.
pub fn solve_taped_adaptive<FP: VectorField, FT: TapedVectorField>(
    plain: &FP,
    taped: &FT,
    tape: &mut Tape,
    u0: Var,
    grid: &TimeGrid,
    opts: &SolveOptions,
) -> Result<TapedTrajectory, OdeError> {
    opts.validate()?;
    if plain.dim() != taped.dim() {
        return Err(OdeError::DimensionMismatch {
            expected: taped.dim(),
            got: plain.dim(),
        });
    }
    check_taped_u0(taped, tape, u0)?;

    let u0_values = tape.value(u0).data().to_vec();
    let (_primal, plan) = dopri8_adaptive(plain, &u0_values, grid, opts)?;

    let mut stats = SolveStats::default();
    let mut rows = vec![u0];
    let mut u = u0;
    let mut t = grid.first();
    let mut next_row = 1usize;
    for (si, &h) in plan.steps.iter().enumerate() {
        u = dopri8_step_taped(taped, tape, u, h)?;
        t += h;
        stats.steps_accepted += 1;
        stats.field_evals += tableau::STAGES;
        if !tape.value(u).is_finite() {
            return Err(OdeError::Numerical { t });
        }
        while next_row < plan.rows_after.len() && plan.rows_after[next_row] == si + 1 {
            rows.push(u);
            next_row += 1;
        }
    }
    debug_assert_eq!(rows.len(), grid.len());
    Ok(TapedTrajectory { rows, stats })
}

fn dopri8_step_taped<F: TapedVectorField>(
    field: &F,
    tape: &mut Tape,
    u: Var,
    h: f64,
) -> Result<Var, OdeError> {
    let mut ks: Vec<Var> = Vec::with_capacity(tableau::STAGES);
    ks.push(field.eval_var(tape, u)?);
    for s in 1..tableau::STAGES {
        let mut stage = u;
        for (j, &k) in ks.iter().enumerate() {
            let a = tableau::A[s][j];
            if a != 0.0 {
                stage = add_scaled(tape, stage, k, h * a)?;
            }
        }
        ks.push(field.eval_var(tape, stage)?);
    }
    let mut out = u;
    for (s, &k) in ks.iter().enumerate() {
        let b = tableau::B8[s];
        if b != 0.0 {
            out = add_scaled(tape, out, k, h * b)?;
        }
    }
    Ok(out)
}

fn check_taped_u0<F: TapedVectorField>(field: &F, tape: &Tape, u0: Var) -> Result<(), OdeError> {
    let shape = tape.value(u0).shape();
    if shape != (field.dim(), 1) {
        return Err(OdeError::DimensionMismatch {
            expected: field.dim(),
            got: shape.0,
        });
    }
    Ok(())
}

/// One explicit step of a fixed-step scheme; used by the order estimator.
pub trait FixedStepper {
    fn advance<F: VectorField>(&self, field: &F, t: f64, u: &[f64], h: f64) -> Vec<f64>;
}

pub struct Rk4Step;

impl FixedStepper for Rk4Step {
    fn advance<F: VectorField>(&self, field: &F, t: f64, u: &[f64], h: f64) -> Vec<f64> {
        let d = u.len();
        let mut k1 = vec![0.0; d];
        let mut k2 = vec![0.0; d];
        let mut k3 = vec![0.0; d];
        let mut k4 = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        field.eval_into(t, u, &mut k1);
        for i in 0..d {
            tmp[i] = u[i] + 0.5 * h * k1[i];
        }
        field.eval_into(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..d {
            tmp[i] = u[i] + 0.5 * h * k2[i];
        }
        field.eval_into(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..d {
            tmp[i] = u[i] + h * k3[i];
        }
        field.eval_into(t + h, &tmp, &mut k4);
        (0..d)
            .map(|i| u[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }
}

pub struct Dopri8Step;

impl FixedStepper for Dopri8Step {
    fn advance<F: VectorField>(&self, field: &F, t: f64, u: &[f64], h: f64) -> Vec<f64> {
        let d = u.len();
        let mut ks: Vec<Vec<f64>> = (0..tableau::STAGES).map(|_| vec![0.0; d]).collect();
        let mut stage_u = vec![0.0; d];
        dopri8_stage_sweep(field, t, u, h, &mut ks, &mut stage_u);
        (0..d)
            .map(|i| {
                let acc: f64 = (0..tableau::STAGES)
                    .map(|s| tableau::B8[s] * ks[s][i])
                    .sum();
                u[i] + h * acc
            })
            .collect()
    }
}

/// Richardson estimate of a fixed-step scheme's empirical order: integrate
/// with `base_steps * 2^l` steps for each level and average
/// `log2(err_l / err_{l+1})`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_order<F: VectorField, S: FixedStepper>(
    stepper: &S,
    field: &F,
    u0: &[f64],
    t0: f64,
    t1: f64,
    exact_final: &[f64],
    base_steps: usize,
    levels: usize,
) -> f64 {
    assert!(levels >= 2, "need at least two levels for an error ratio");
    let mut errs = Vec::with_capacity(levels);
    for l in 0..levels {
        let n = base_steps << l;
        let h = (t1 - t0) / n as f64;
        let mut u = u0.to_vec();
        let mut t = t0;
        for _ in 0..n {
            u = stepper.advance(field, t, &u, h);
            t += h;
        }
        let err = u
            .iter()
            .zip(exact_final)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        errs.push(err);
    }
    let mut orders = Vec::new();
    for w in errs.windows(2) {
        orders.push((w[0] / w[1]).log2());
    }
    orders.iter().sum::<f64>() / orders.len() as f64
}

/// Empirical order of one of the shipped methods on a problem with a known
/// final state.
#[allow(clippy::too_many_arguments)]
pub fn convergence_order<F: VectorField>(
    method: Method,
    field: &F,
    u0: &[f64],
    t0: f64,
    t1: f64,
    exact_final: &[f64],
    base_steps: usize,
    levels: usize,
) -> f64 {
    match method {
        Method::Rk4Fixed => {
            empirical_order(&Rk4Step, field, u0, t0, t1, exact_final, base_steps, levels)
        }
        Method::Dopri8 => empirical_order(
            &Dopri8Step,
            field,
            u0,
            t0,
            t1,
            exact_final,
            base_steps,
            levels,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adiff::Tensor;
    use crate::field::FieldSpec;

    fn decay() -> FnField<impl Fn(f64, &[f64], &mut [f64])> {
        FnField {
            dim: 1,
            f: |_t: f64, u: &[f64], du: &mut [f64]| du[0] = -u[0],
        }
    }

    #[test]
    fn dopri8_defaults_hit_exponential_to_1e7() {
        let grid = TimeGrid::from_times(vec![0.0, 1.0]).unwrap();
        let traj = solve(&decay(), &[1.0], &grid, &SolveOptions::default()).unwrap();
        let got = traj.row(1)[0];
        assert!(
            (got - (-1.0f64).exp()).abs() <= 1e-7,
            "u(1) = {got}, err = {}",
            (got - (-1.0f64).exp()).abs()
        );
        assert!(traj.stats.steps_accepted > 0);
    }

    #[test]
    fn zero_field_is_constant() {
        let zero = FnField {
            dim: 3,
            f: |_t: f64, _u: &[f64], du: &mut [f64]| du.fill(0.0),
        };
        let grid = TimeGrid::uniform(0.0, 1.0, 17).unwrap();
        for opts in [SolveOptions::default(), SolveOptions::rk4(2)] {
            let traj = solve(&zero, &[0.5, -3.0, 7.5], &grid, &opts).unwrap();
            for i in 0..traj.len() {
                assert_eq!(traj.row(i), &[0.5, -3.0, 7.5]);
            }
        }
    }

    #[test]
    fn harmonic_oscillator_energy_drift_within_1e6() {
        let osc = FnField {
            dim: 2,
            f: |_t: f64, u: &[f64], du: &mut [f64]| {
                du[0] = u[1];
                du[1] = -u[0];
            },
        };
        // 10 periods.
        let t_end = 20.0 * std::f64::consts::PI;
        let grid = TimeGrid::from_times(vec![0.0, t_end]).unwrap();
        let traj = solve(&osc, &[1.0, 0.0], &grid, &SolveOptions::default()).unwrap();
        let row = traj.row(1);
        let energy = row[0] * row[0] + row[1] * row[1];
        assert!(
            (energy - 1.0).abs() <= 1e-6,
            "drift = {}",
            (energy - 1.0).abs()
        );
    }

    #[test]
    fn grid_times_are_exact_hits_and_row0_is_u0() {
        let grid = TimeGrid::uniform(0.0, 2.0, 9).unwrap();
        let traj = solve(&decay(), &[1.25], &grid, &SolveOptions::default()).unwrap();
        assert_eq!(traj.grid.times(), grid.times());
        assert_eq!(traj.row(0)[0].to_bits(), 1.25f64.to_bits());
        for (i, &t) in grid.times().iter().enumerate() {
            let expect = 1.25 * (-t).exp();
            assert!((traj.row(i)[0] - expect).abs() <= 1e-7);
        }
    }

    #[test]
    fn single_point_grid_returns_initial_state() {
        let grid = TimeGrid::from_times(vec![0.0]).unwrap();
        let traj = solve(&decay(), &[4.0], &grid, &SolveOptions::default()).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.row(0), &[4.0]);
    }

    #[test]
    fn tightening_tolerances_never_hurts() {
        let exact = (-1.0f64).exp();
        let grid = TimeGrid::from_times(vec![0.0, 1.0]).unwrap();
        let mut last_err = f64::INFINITY;
        for k in 0..3 {
            let f = 10f64.powi(k);
            let opts = SolveOptions {
                rtol: 1e-7 / f,
                atol: 1e-9 / f,
                ..SolveOptions::default()
            };
            let traj = solve(&decay(), &[1.0], &grid, &opts).unwrap();
            let err = (traj.row(1)[0] - exact).abs();
            assert!(
                err <= last_err + 1e-15,
                "tightening raised error: {err} > {last_err}"
            );
            last_err = err;
        }
    }

    #[test]
    fn linear_field_scales_linearly() {
        let lin = FnField {
            dim: 2,
            f: |_t: f64, u: &[f64], du: &mut [f64]| {
                du[0] = 0.3 * u[0] - 1.1 * u[1];
                du[1] = 0.7 * u[0] + 0.2 * u[1];
            },
        };
        let grid = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
        let a = solve(&lin, &[1.0, -0.5], &grid, &SolveOptions::default()).unwrap();
        let b = solve(&lin, &[3.0, -1.5], &grid, &SolveOptions::default()).unwrap();
        for i in 0..a.len() {
            for j in 0..2 {
                assert!((3.0 * a.row(i)[j] - b.row(i)[j]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn stiffness_guard_reports_time_reached() {
        let stiff = FnField {
            dim: 1,
            f: |_t: f64, u: &[f64], du: &mut [f64]| du[0] = -1e9 * u[0],
        };
        let grid = TimeGrid::from_times(vec![0.0, 1.0]).unwrap();
        let opts = SolveOptions {
            max_steps: 10,
            ..SolveOptions::default()
        };
        match solve(&stiff, &[1.0], &grid, &opts) {
            Err(OdeError::Stiffness {
                t_reached,
                max_steps,
            }) => {
                assert!(t_reached < 1.0);
                assert_eq!(max_steps, 10);
            }
            other => panic!("expected stiffness error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_field_is_a_numerical_error() {
        let bad = FnField {
            dim: 1,
            f: |_t: f64, _u: &[f64], du: &mut [f64]| du[0] = f64::NAN,
        };
        let grid = TimeGrid::from_times(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            solve(&bad, &[1.0], &grid, &SolveOptions::rk4(1)),
            Err(OdeError::Numerical { .. })
        ));
        assert!(matches!(
            solve(&bad, &[1.0], &grid, &SolveOptions::default()),
            Err(OdeError::Numerical { .. })
        ));
    }

    #[test]
    fn rk4_order_is_four() {
        let p = convergence_order(
            Method::Rk4Fixed,
            &decay(),
            &[1.0],
            0.0,
            2.0,
            &[(-2.0f64).exp()],
            8,
            4,
        );
        assert!((3.7..=4.3).contains(&p), "empirical order {p}");
    }

    #[test]
    fn dopri8_fixed_step_order_is_eight() {
        // u' = u^2, u(0) = 1 has solution 1/(1-t); the strong nonlinearity
        // keeps the order-9 local term dominant. (On pure exponentials this
        // pair superconverges and the Richardson estimate reads ~10.)
        let riccati = FnField {
            dim: 1,
            f: |_t: f64, u: &[f64], du: &mut [f64]| du[0] = u[0] * u[0],
        };
        let p = convergence_order(Method::Dopri8, &riccati, &[1.0], 0.0, 0.9, &[10.0], 12, 4);
        assert!((7.0..=8.5).contains(&p), "empirical order {p}");
    }

    #[test]
    fn euler_reference_order_is_one() {
        struct EulerStep;
        impl FixedStepper for EulerStep {
            fn advance<F: VectorField>(&self, field: &F, t: f64, u: &[f64], h: f64) -> Vec<f64> {
                let mut du = vec![0.0; u.len()];
                field.eval_into(t, u, &mut du);
                u.iter().zip(&du).map(|(x, d)| x + h * d).collect()
            }
        }
        let p = empirical_order(
            &EulerStep,
            &decay(),
            &[1.0],
            0.0,
            2.0,
            &[(-2.0f64).exp()],
            16,
            4,
        );
        assert!((0.8..=1.2).contains(&p), "empirical order {p}");
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::from_times(vec![]).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 0.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.0, -1.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.0, f64::NAN]).is_err());
        assert!(TimeGrid::uniform(0.0, 1.0, 200).is_ok());
    }

    #[test]
    fn taped_rk4_matches_plain_rk4() {
        let spec = FieldSpec::new(3, 5, 2).unwrap();
        let params = FieldParams::init(spec, 8);
        let grid = TimeGrid::uniform(0.0, 1.0, 11).unwrap();
        let opts = SolveOptions::rk4(2);

        let plain = solve(&params, &[0.4, -0.2, 0.9], &grid, &opts).unwrap();

        let mut tape = Tape::new();
        let fv = TapedField::bind(&mut tape, &params).unwrap();
        let u0 = tape.leaf(Tensor::col(vec![0.4, -0.2, 0.9]), false).unwrap();
        let taped = solve_taped(&fv, &mut tape, u0, &grid, &opts).unwrap();
        let materialized = taped.to_trajectory(&tape, &grid);
        for i in 0..grid.len() {
            for j in 0..3 {
                assert!((materialized.row(i)[j] - plain.row(i)[j]).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn taped_rk4_gradient_matches_finite_differences() {
        let spec = FieldSpec::new(2, 4, 2).unwrap();
        let params = FieldParams::init(spec, 17);
        let grid = TimeGrid::uniform(0.0, 1.0, 8).unwrap();
        let opts = SolveOptions::rk4(1);
        let u0 = [0.8, -0.3];

        let loss_of = |theta: &[f64]| -> f64 {
            let p = FieldParams::from_theta(spec, theta.to_vec()).unwrap();
            let mut tape = Tape::new();
            let fv = TapedField::bind(&mut tape, &p).unwrap();
            let u0v = tape.leaf(Tensor::col(u0.to_vec()), false).unwrap();
            let traj = solve_taped(&fv, &mut tape, u0v, &grid, &opts).unwrap();
            let last = *traj.rows.last().unwrap();
            let sq = tape.square(last).unwrap();
            let root = tape.sum(sq).unwrap();
            tape.scalar_value(root)
        };

        let mut tape = Tape::new();
        let fv = TapedField::bind(&mut tape, &params).unwrap();
        let u0v = tape.leaf(Tensor::col(u0.to_vec()), false).unwrap();
        let traj = solve_taped(&fv, &mut tape, u0v, &grid, &opts).unwrap();
        let last = *traj.rows.last().unwrap();
        let sq = tape.square(last).unwrap();
        let root = tape.sum(sq).unwrap();
        let grads = tape.backward(root).unwrap();
        let g = fv.flatten_grads(&grads);

        let h = 1e-5;
        for i in (0..params.theta.len()).step_by(5) {
            let mut tp = params.theta.clone();
            let mut tm = params.theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (loss_of(&tp) - loss_of(&tm)) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() <= 1e-4 * g[i].abs().max(fd.abs()).max(1e-3),
                "theta[{i}]: ad={} fd={fd}",
                g[i]
            );
        }
    }

    #[test]
    fn taped_adaptive_matches_untaped_solution() {
        let spec = FieldSpec::new(2, 4, 2).unwrap();
        let params = FieldParams::init(spec, 33);
        let grid = TimeGrid::uniform(0.0, 1.0, 6).unwrap();
        let opts = SolveOptions::default();

        let plain = solve(&params, &[0.5, 0.1], &grid, &opts).unwrap();

        let mut tape = Tape::new();
        let fv = TapedField::bind(&mut tape, &params).unwrap();
        let u0 = tape.leaf(Tensor::col(vec![0.5, 0.1]), false).unwrap();
        let taped = solve_taped_adaptive(&params, &fv, &mut tape, u0, &grid, &opts).unwrap();
        assert_eq!(taped.rows.len(), grid.len());
        let materialized = taped.to_trajectory(&tape, &grid);
        for i in 0..grid.len() {
            for j in 0..2 {
                assert!((materialized.row(i)[j] - plain.row(i)[j]).abs() <= 1e-12);
            }
        }

        // Gradients flow through the replayed steps.
        let last = *taped.rows.last().unwrap();
        let sq = tape.square(last).unwrap();
        let root = tape.sum(sq).unwrap();
        let grads = tape.backward(root).unwrap();
        let g = fv.flatten_grads(&grads);
        assert!(g.iter().any(|x| x.abs() > 0.0));
    }

    #[test]
    fn trajectories_from_bounded_states_stay_finite() {
        // tanh layers are globally Lipschitz, so unit-interval solves from
        // moderate initial data cannot blow up.
        let spec = FieldSpec::new(4, 6, 3).unwrap();
        for seed in [1u64, 2, 3] {
            let params = FieldParams::init(spec, seed);
            let grid = TimeGrid::uniform(0.0, 1.0, 50).unwrap();
            let u0 = [5.0, -5.0, 5.0, -5.0]; // inf-norm well inside 10
            let traj = solve(&params, &u0, &grid, &SolveOptions::default()).unwrap();
            assert!(traj.values().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn substepping_improves_rk4_accuracy() {
        let grid = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
        let exact = (-1.0f64).exp();
        let coarse = solve(&decay(), &[1.0], &grid, &SolveOptions::rk4(1)).unwrap();
        let fine = solve(&decay(), &[1.0], &grid, &SolveOptions::rk4(8)).unwrap();
        let e_coarse = (coarse.row(2)[0] - exact).abs();
        let e_fine = (fine.row(2)[0] - exact).abs();
        assert!(e_fine < e_coarse);
    }
}
