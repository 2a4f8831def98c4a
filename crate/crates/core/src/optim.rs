//! Two-stage optimization: Adam for a fixed number of full-batch epochs,
//! then limited-memory BFGS refinement with a strong-Wolfe line search.
//!
//! The L-BFGS `lr` is the initial trial step scale handed to the line
//! search (the line search may expand well past it), matching the common
//! library semantics for that knob.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient encountered (divergence)")]
    Divergence,
    #[error("gradient length {got} does not match parameter length {expected}")]
    GradLength { expected: usize, got: usize },
    #[error("objective evaluation failed: {0}")]
    Objective(String),
}

pub type ObjectiveResult = Result<(f64, Vec<f64>), OptimError>;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 300,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<(), OptimError> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(OptimError::InvalidConfig(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimError::InvalidConfig(format!(
                    "{name} must be in [0, 1), got {b}"
                )));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(OptimError::InvalidConfig("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    cfg.validate()?;
    if grad.len() != theta.len() {
        return Err(OptimError::GradLength {
            expected: theta.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::Divergence);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    /// Initial trial step scale for the line search.
    pub lr: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub change_tol: f64,
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            lr: 1e-4,
            max_iters: 1000,
            grad_tol: 1e-6,
            change_tol: 1e-6,
            history: 20,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

impl LbfgsConfig {
    fn validate(&self) -> Result<(), OptimError> {
        for (name, v) in [
            ("lr", self.lr),
            ("grad_tol", self.grad_tol),
            ("change_tol", self.change_tol),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(OptimError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        if self.history == 0 {
            return Err(OptimError::InvalidConfig("history must be >= 1".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(OptimError::InvalidConfig(
                "need 0 < c1 < c2 < 1 for strong Wolfe".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    ChangeTol,
    MaxIters,
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    /// Best-seen parameters (lowest objective value encountered).
    pub theta: Vec<f64>,
    pub value: f64,
    pub termination: Termination,
    pub iterations: usize,
    pub evals: usize,
    /// Objective value after each iteration, starting with the initial one.
    pub curve: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize a deterministic objective with limited-memory BFGS.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    theta0: &[f64],
    cfg: &LbfgsConfig,
) -> Result<LbfgsResult, OptimError>
where
    F: FnMut(&[f64]) -> ObjectiveResult,
{
    cfg.validate()?;
    if theta0.iter().any(|x| !x.is_finite()) {
        return Err(OptimError::InvalidConfig("theta0 must be finite".into()));
    }

    let n = theta0.len();
    let mut theta = theta0.to_vec();
    let (mut f, mut g) = objective(&theta)?;
    let mut evals = 1usize;
    if !f.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(OptimError::Divergence);
    }

    let mut best_theta = theta.clone();
    let mut best_f = f;
    let mut curve = vec![f];

    if inf_norm(&g) <= cfg.grad_tol {
        return Ok(LbfgsResult {
            theta: best_theta,
            value: best_f,
            termination: Termination::GradTol,
            iterations: 0,
            evals,
            curve,
        });
    }

    // History of (s, y, 1/(y.s)) pairs, newest last.
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut termination = Termination::MaxIters;
    let mut iterations = 0usize;

    for iter in 1..=cfg.max_iters {
        iterations = iter;

        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let alpha = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= alpha * y[i];
            }
            alphas.push(alpha);
        }
        if let Some((s, y, _)) = history.last() {
            let gamma = dot(s, y) / dot(y, y);
            for x in d.iter_mut() {
                *x *= gamma;
            }
        }
        for ((s, y, rho), alpha) in history.iter().zip(alphas.iter().rev()) {
            let beta = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (alpha - beta) * s[i];
            }
        }

        let mut gtd = dot(&g, &d);
        if gtd >= 0.0 {
            // Not a descent direction (numerical breakdown): restart from
            // steepest descent.
            history.clear();
            d = g.iter().map(|x| -x).collect();
            gtd = dot(&g, &d);
            if gtd >= 0.0 {
                termination = Termination::LineSearchFailed;
                break;
            }
        }

        let t0 = if iter == 1 {
            (1.0f64.min(1.0 / g.iter().map(|x| x.abs()).sum::<f64>())) * cfg.lr
        } else {
            cfg.lr
        };

        let ls = strong_wolfe(&mut objective, &theta, &d, f, &g, gtd, t0, cfg, &mut evals)?;
        let Some((t, f_new, g_new)) = ls else {
            termination = Termination::LineSearchFailed;
            break;
        };

        let s: Vec<f64> = d.iter().map(|x| t * x).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 {
            if history.len() == cfg.history {
                history.remove(0);
            }
            history.push((s.clone(), y, 1.0 / sy));
        }

        let f_prev = f;
        for i in 0..n {
            theta[i] += s[i];
        }
        f = f_new;
        g = g_new;
        curve.push(f);
        if f < best_f {
            best_f = f;
            best_theta = theta.clone();
        }

        if inf_norm(&g) <= cfg.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        if inf_norm(&s) <= cfg.change_tol && (f_prev - f).abs() <= cfg.change_tol {
            termination = Termination::ChangeTol;
            break;
        }
    }

    Ok(LbfgsResult {
        theta: best_theta,
        value: best_f,
        termination,
        iterations,
        evals,
        curve,
    })
}

/// Cubic interpolation of a step within `bounds` from two (position, value,
/// slope) samples.
fn cubic_interpolate(
    x1: f64,
    f1: f64,
    g1: f64,
    x2: f64,
    f2: f64,
    g2: f64,
    bounds: Option<(f64, f64)>,
) -> f64 {
    let (lo, hi) = match bounds {
        Some(b) => b,
        None => {
            if x1 < x2 {
                (x1, x2)
            } else {
                (x2, x1)
            }
        }
    };
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let min_pos = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        min_pos.clamp(lo, hi)
    } else {
        (lo + hi) / 2.0
    }
}

#[derive(Clone)]
struct LinePoint {
    t: f64,
    f: f64,
    g: Vec<f64>,
    gtd: f64,
}

/// Bracket-and-zoom strong-Wolfe search along `d`. A non-finite objective at
/// a trial point is treated as "too far" and the search backtracks. Returns
/// `None` when no acceptable finite point is found.
#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    objective: &mut F,
    theta: &[f64],
    d: &[f64],
    f0: f64,
    g0: &[f64],
    gtd0: f64,
    t_init: f64,
    cfg: &LbfgsConfig,
    evals: &mut usize,
) -> Result<Option<(f64, f64, Vec<f64>)>, OptimError>
where
    F: FnMut(&[f64]) -> ObjectiveResult,
{
    let n = theta.len();
    let d_norm = inf_norm(d);
    let mut probe = |t: f64| -> Result<Option<(f64, Vec<f64>, f64)>, OptimError> {
        let x: Vec<f64> = (0..n).map(|i| theta[i] + t * d[i]).collect();
        match objective(&x) {
            Ok((f, g)) => {
                *evals += 1;
                if f.is_finite() && g.iter().all(|v| v.is_finite()) {
                    let gtd = dot(&g, d);
                    Ok(Some((f, g, gtd)))
                } else {
                    Ok(None)
                }
            }
            // A failed solve at an aggressive trial point acts like an
            // infinite objective: back off instead of aborting.
            Err(OptimError::Objective(_)) => {
                *evals += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };

    // Evaluate the initial trial, halving on non-finite results.
    let mut t = t_init;
    let mut sample = None;
    for _ in 0..cfg.max_line_search {
        match probe(t)? {
            Some(s) => {
                sample = Some(s);
                break;
            }
            None => t *= 0.5,
        }
    }
    let Some((mut f_new, mut g_new, mut gtd_new)) = sample else {
        return Ok(None);
    };

    // Bracketing phase.
    let mut ls_iter = 0usize;
    let (mut bracket, mut done) = {
        let mut prev = LinePoint {
            t: 0.0,
            f: f0,
            g: g0.to_vec(),
            gtd: gtd0,
        };
        let mut bracket: Option<[LinePoint; 2]> = None;
        let mut done = None;
        while ls_iter < cfg.max_line_search {
            ls_iter += 1;
            if f_new > f0 + cfg.c1 * t * gtd0 || (ls_iter > 1 && f_new >= prev.f) {
                bracket = Some([
                    prev,
                    LinePoint {
                        t,
                        f: f_new,
                        g: g_new.clone(),
                        gtd: gtd_new,
                    },
                ]);
                break;
            }
            if gtd_new.abs() <= -cfg.c2 * gtd0 {
                done = Some(LinePoint {
                    t,
                    f: f_new,
                    g: g_new.clone(),
                    gtd: gtd_new,
                });
                break;
            }
            if gtd_new >= 0.0 {
                bracket = Some([
                    prev,
                    LinePoint {
                        t,
                        f: f_new,
                        g: g_new.clone(),
                        gtd: gtd_new,
                    },
                ]);
                break;
            }

            // Expand.
            let min_step = t + 0.01 * (t - prev.t);
            let max_step = t * 10.0;
            let next_t = cubic_interpolate(
                prev.t,
                prev.f,
                prev.gtd,
                t,
                f_new,
                gtd_new,
                Some((min_step, max_step)),
            );
            prev = LinePoint {
                t,
                f: f_new,
                g: g_new.clone(),
                gtd: gtd_new,
            };
            t = next_t;
            match probe(t)? {
                Some((f, g, gtd)) => {
                    f_new = f;
                    g_new = g;
                    gtd_new = gtd;
                }
                None => {
                    // Too far out; bracket between the last good point and t.
                    bracket = Some([
                        LinePoint {
                            t: prev.t,
                            f: prev.f,
                            g: prev.g.clone(),
                            gtd: prev.gtd,
                        },
                        LinePoint {
                            t,
                            f: f64::INFINITY,
                            g: vec![0.0; n],
                            gtd: 0.0,
                        },
                    ]);
                    break;
                }
            }
        }
        if bracket.is_none() && done.is_none() {
            // Ran out of expansion budget: bracket the whole range.
            bracket = Some([
                LinePoint {
                    t: 0.0,
                    f: f0,
                    g: g0.to_vec(),
                    gtd: gtd0,
                },
                LinePoint {
                    t,
                    f: f_new,
                    g: g_new.clone(),
                    gtd: gtd_new,
                },
            ]);
        }
        (bracket, done)
    };

    if let Some(p) = done.take() {
        return Ok(Some((p.t, p.f, p.g)));
    }
    let mut br = bracket.take().unwrap();

    // Zoom phase.
    let mut insufficient = false;
    let (mut lo, mut hi) = if br[0].f <= br[1].f { (0, 1) } else { (1, 0) };
    while ls_iter < cfg.max_line_search {
        ls_iter += 1;
        if (br[1].t - br[0].t).abs() * d_norm < cfg.change_tol {
            break;
        }
        let mut t = cubic_interpolate(
            br[0].t, br[0].f, br[0].gtd, br[1].t, br[1].f, br[1].gtd, None,
        );

        // Nudge trials that crowd the bracket boundary.
        let t_max = br[0].t.max(br[1].t);
        let t_min = br[0].t.min(br[1].t);
        let eps = 0.1 * (t_max - t_min);
        if (t_max - t).min(t - t_min) < eps {
            if insufficient || t >= t_max || t <= t_min {
                t = if (t - t_max).abs() < (t - t_min).abs() {
                    t_max - eps
                } else {
                    t_min + eps
                };
                insufficient = false;
            } else {
                insufficient = true;
            }
        } else {
            insufficient = false;
        }

        let (f_t, g_t, gtd_t) = match probe(t)? {
            Some(v) => v,
            None => {
                // Shrink toward the low end.
                br[hi] = LinePoint {
                    t,
                    f: f64::INFINITY,
                    g: vec![0.0; n],
                    gtd: 0.0,
                };
                let (l, h) = if br[0].f <= br[1].f { (0, 1) } else { (1, 0) };
                lo = l;
                hi = h;
                continue;
            }
        };

        if f_t > f0 + cfg.c1 * t * gtd0 || f_t >= br[lo].f {
            br[hi] = LinePoint {
                t,
                f: f_t,
                g: g_t,
                gtd: gtd_t,
            };
            let (l, h) = if br[0].f <= br[1].f { (0, 1) } else { (1, 0) };
            lo = l;
            hi = h;
        } else {
            if gtd_t.abs() <= -cfg.c2 * gtd0 {
                br[lo] = LinePoint {
                    t,
                    f: f_t,
                    g: g_t,
                    gtd: gtd_t,
                };
                break;
            }
            if gtd_t * (br[hi].t - br[lo].t) >= 0.0 {
                // Old low becomes the new high.
                let low_copy = br[lo].clone();
                br[hi] = low_copy;
            }
            br[lo] = LinePoint {
                t,
                f: f_t,
                g: g_t,
                gtd: gtd_t,
            };
        }
    }

    let p = &br[lo];
    if !p.f.is_finite() || p.t == 0.0 {
        return Ok(None);
    }
    Ok(Some((p.t, p.f, p.g.clone())))
}

/// Outcome of the Adam-then-L-BFGS schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(skip)]
    pub theta: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss before each Adam update, one entry per epoch.
    pub adam_curve: Vec<f64>,
    /// Loss after each L-BFGS iteration, starting from the stage entry value.
    pub lbfgs_curve: Vec<f64>,
    pub lbfgs_termination: Option<Termination>,
    pub lbfgs_iterations: usize,
    pub adam_seconds: f64,
    pub lbfgs_seconds: f64,
    /// Diagnostics when a stage aborted; `theta` still holds the best seen.
    pub failure: Option<String>,
}

/// Run the Adam stage then the L-BFGS stage. A stage failure is recorded in
/// `failure` and the best-seen parameters are returned.
pub fn two_stage_fit<F>(
    mut objective: F,
    theta0: &[f64],
    adam_cfg: &AdamConfig,
    lbfgs_cfg: &LbfgsConfig,
) -> Result<FitResult, OptimError>
where
    F: FnMut(&[f64]) -> ObjectiveResult,
{
    adam_cfg.validate()?;
    lbfgs_cfg.validate()?;

    let mut theta = theta0.to_vec();
    let mut state = AdamState::new(theta.len());
    let mut adam_curve = Vec::with_capacity(adam_cfg.epochs);
    let mut best_theta = theta.clone();
    let mut best_f = f64::INFINITY;
    let mut initial_loss = f64::NAN;
    let mut failure = None;

    let adam_start = Instant::now();
    for epoch in 0..adam_cfg.epochs {
        let (f, grad) = match objective(&theta) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(format!("adam epoch {epoch}: {e}"));
                break;
            }
        };
        if epoch == 0 {
            initial_loss = f;
        }
        adam_curve.push(f);
        if f.is_finite() && f < best_f {
            best_f = f;
            best_theta = theta.clone();
        }
        if let Err(e) = adam_step(&mut theta, &grad, &mut state, adam_cfg) {
            failure = Some(format!("adam epoch {epoch}: {e}"));
            break;
        }
    }
    let adam_seconds = adam_start.elapsed().as_secs_f64();

    let mut lbfgs_curve = Vec::new();
    let mut lbfgs_termination = None;
    let mut lbfgs_iterations = 0;
    let mut lbfgs_seconds = 0.0;

    if failure.is_none() {
        let lbfgs_start = Instant::now();
        match lbfgs_minimize(&mut objective, &theta, lbfgs_cfg) {
            Ok(res) => {
                if res.value.is_finite() && res.value < best_f {
                    best_f = res.value;
                    best_theta = res.theta.clone();
                }
                if initial_loss.is_nan() {
                    initial_loss = res.curve[0];
                }
                lbfgs_curve = res.curve;
                lbfgs_termination = Some(res.termination);
                lbfgs_iterations = res.iterations;
            }
            Err(e) => failure = Some(format!("lbfgs: {e}")),
        }
        lbfgs_seconds = lbfgs_start.elapsed().as_secs_f64();
    }

    Ok(FitResult {
        theta: best_theta,
        initial_loss,
        final_loss: best_f,
        adam_curve,
        lbfgs_curve,
        lbfgs_termination,
        lbfgs_iterations,
        adam_seconds,
        lbfgs_seconds,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(center: Vec<f64>) -> impl FnMut(&[f64]) -> ObjectiveResult {
        move |x: &[f64]| {
            let f = x
                .iter()
                .zip(&center)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>();
            let g = x.iter().zip(&center).map(|(a, c)| 2.0 * (a - c)).collect();
            Ok((f, g))
        }
    }

    fn rosenbrock(x: &[f64]) -> ObjectiveResult {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Ok((f, g))
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut theta = vec![1.5, -2.0];
        let mut state = AdamState::new(2);
        adam_step(&mut theta, &[0.0, 0.0], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(theta, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_about_lr() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut theta = vec![1.0];
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[0.37], &mut state, &cfg).unwrap();
        // Bias correction makes m_hat/sqrt(v_hat) ~= sign(g) on step 1.
        let delta = 1.0 - theta[0];
        assert!(
            (delta - cfg.lr).abs() <= 1e-6 * cfg.lr.abs() + 1e-9,
            "delta = {delta}"
        );
    }

    #[test]
    fn adam_drives_scalar_quadratic_below_1e3() {
        let cfg = AdamConfig {
            lr: 1e-2,
            epochs: 5000,
            ..AdamConfig::default()
        };
        let mut theta = vec![1.0];
        let mut state = AdamState::new(1);
        for _ in 0..cfg.epochs {
            let g = vec![2.0 * theta[0]];
            adam_step(&mut theta, &g, &mut state, &cfg).unwrap();
        }
        assert!(theta[0].abs() <= 1e-3, "x = {}", theta[0]);
    }

    #[test]
    fn adam_update_magnitude_bounded() {
        let cfg = AdamConfig::default();
        let mut s = crate::field::NormalSampler::new(31);
        let mut theta = vec![0.0; 64];
        let mut state = AdamState::new(64);
        for _ in 0..50 {
            let prev = theta.clone();
            let g: Vec<f64> = (0..64).map(|_| 10.0 * s.sample()).collect();
            adam_step(&mut theta, &g, &mut state, &cfg).unwrap();
            for (a, b) in theta.iter().zip(&prev) {
                assert!((a - b).abs() <= 10.0 * cfg.lr);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut theta = vec![1.0];
        let mut state = AdamState::new(1);
        let err = adam_step(&mut theta, &[f64::NAN], &mut state, &AdamConfig::default());
        assert!(matches!(err, Err(OptimError::Divergence)));
    }

    #[test]
    fn lbfgs_reaches_quadratic_minimum_within_50_iterations() {
        let center = vec![1.0, -2.0, 3.0, 0.5];
        let cfg = LbfgsConfig {
            max_iters: 50,
            lr: 1.0,
            ..LbfgsConfig::default()
        };
        let res = lbfgs_minimize(quadratic(center.clone()), &[0.0; 4], &cfg).unwrap();
        assert!(res.iterations <= 50);
        for (a, c) in res.theta.iter().zip(&center) {
            assert!((a - c).abs() <= 1e-5, "{a} vs {c}");
        }
        assert_eq!(res.termination, Termination::GradTol);
    }

    #[test]
    fn lbfgs_solves_rosenbrock_within_200_iterations() {
        let cfg = LbfgsConfig {
            max_iters: 200,
            ..LbfgsConfig::default()
        };
        let res = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!(
            res.value <= 1e-6,
            "f = {} after {} iterations",
            res.value,
            res.iterations
        );
        assert!((res.theta[0] - 1.0).abs() <= 1e-2);
        assert!((res.theta[1] - 1.0).abs() <= 1e-2);
    }

    #[test]
    fn lbfgs_at_exact_minimum_terminates_immediately() {
        let res = lbfgs_minimize(
            quadratic(vec![2.0, 2.0]),
            &[2.0, 2.0],
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.termination, Termination::GradTol);
        assert_eq!(res.theta, vec![2.0, 2.0]);
    }

    #[test]
    fn lbfgs_accepted_values_never_increase() {
        let cfg = LbfgsConfig {
            max_iters: 60,
            lr: 1.0,
            ..LbfgsConfig::default()
        };
        let res = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        for w in res.curve.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "objective increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn lbfgs_is_deterministic() {
        let cfg = LbfgsConfig::default();
        let a = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        let b = lbfgs_minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        for (x, y) in a.theta.iter().zip(&b.theta) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn line_search_backtracks_over_non_finite_regions() {
        // Objective is finite only on |x| < 2; minimum at 1.5.
        let obj = |x: &[f64]| -> ObjectiveResult {
            if x[0].abs() >= 2.0 {
                return Ok((f64::INFINITY, vec![f64::INFINITY]));
            }
            Ok(((x[0] - 1.5).powi(2), vec![2.0 * (x[0] - 1.5)]))
        };
        let cfg = LbfgsConfig {
            lr: 100.0, // deliberately wild first trial
            max_iters: 50,
            ..LbfgsConfig::default()
        };
        let res = lbfgs_minimize(obj, &[0.0], &cfg).unwrap();
        assert!((res.theta[0] - 1.5).abs() <= 1e-4, "x = {}", res.theta[0]);
    }

    #[test]
    fn line_search_failure_returns_best_seen_theta() {
        // Objective evaluates only at the exact start; every trial point
        // fails, so the very first line search gives up.
        let x0 = [2.0];
        let obj = move |x: &[f64]| -> ObjectiveResult {
            if x[0] == 2.0 {
                Ok((4.0, vec![4.0]))
            } else {
                Err(OptimError::Objective("off-grid".into()))
            }
        };
        let res = lbfgs_minimize(obj, &x0, &LbfgsConfig::default()).unwrap();
        assert_eq!(res.termination, Termination::LineSearchFailed);
        assert_eq!(res.theta, vec![2.0]);
        assert_eq!(res.value, 4.0);
    }

    #[test]
    fn two_stage_on_stationary_point_is_flat() {
        let adam = AdamConfig {
            epochs: 10,
            ..AdamConfig::default()
        };
        let res = two_stage_fit(
            quadratic(vec![0.0, 0.0]),
            &[0.0, 0.0],
            &adam,
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert!(res.failure.is_none());
        assert_eq!(res.theta, vec![0.0, 0.0]);
        for v in res.adam_curve.iter().chain(&res.lbfgs_curve) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn two_stage_reduces_loss_by_90_percent() {
        let adam = AdamConfig {
            lr: 1e-2,
            epochs: 100,
            ..AdamConfig::default()
        };
        let lbfgs = LbfgsConfig {
            max_iters: 100,
            lr: 1.0,
            ..LbfgsConfig::default()
        };
        let res = two_stage_fit(rosenbrock, &[-1.2, 1.0], &adam, &lbfgs).unwrap();
        assert!(res.failure.is_none());
        assert!(res.final_loss < 0.1 * res.initial_loss);
        for v in res.adam_curve.iter().chain(&res.lbfgs_curve) {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn two_stage_notes_stage_failure_and_returns_best_theta() {
        let mut calls = 0usize;
        let obj = move |x: &[f64]| -> ObjectiveResult {
            calls += 1;
            if calls > 5 {
                return Err(OptimError::Objective("synthetic blow-up".into()));
            }
            Ok((x[0] * x[0], vec![2.0 * x[0]]))
        };
        let adam = AdamConfig {
            epochs: 50,
            ..AdamConfig::default()
        };
        let res = two_stage_fit(obj, &[1.0], &adam, &LbfgsConfig::default()).unwrap();
        assert!(res.failure.is_some());
        assert!(res.theta[0].is_finite());
    }
}
