//! One step of the inverse iteration: minimize the strictly convex functional
//! `J_eps(v) = sum (1/p)(|grad v|^2 + eps^2)^{p/2} h^d - sum f v h^d`
//! over grid functions with zero boundary values.

use serde::{Deserialize, Serialize};

use crate::calculus::{CellOps, GridFunction};
use crate::error::{Error, Result};
use crate::linalg::{dot, sup_abs, BandedSym};

/// Descent direction used by [`solve_step`]. Both methods take monotone
/// Armijo-backtracked steps on the same objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescentMethod {
    /// Regularized Newton direction from the exact banded Hessian.
    Newton,
    /// Gradient scaled by the inverse diagonal of the p = 2 stencil, with a
    /// Barzilai-Borwein initial step.
    PreconditionedGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub p: f64,
    /// Base stopping threshold; the effective threshold on the sup-norm of
    /// the functional gradient is `tol_grad * max(1, sup|f|)`.
    pub tol_grad: f64,
    pub max_inner_iters: usize,
    /// Regularization stages, nonincreasing. Empty means the default for
    /// the grid (see [`default_eps_schedule`]).
    pub eps_schedule: Vec<f64>,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub method: DescentMethod,
    pub verbose: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            p: 2.0,
            tol_grad: 1e-10,
            max_inner_iters: 200_000,
            eps_schedule: Vec::new(),
            armijo_c: 1e-4,
            backtrack: 0.5,
            method: DescentMethod::Newton,
            verbose: false,
        }
    }
}

impl SolverConfig {
    pub fn new(p: f64) -> Self {
        Self {
            p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p > 1.0) {
            return Err(Error::InvalidParameter(format!("p must exceed 1, got {}", self.p)));
        }
        if !(self.tol_grad.is_finite() && self.tol_grad > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tol_grad must be positive, got {}",
                self.tol_grad
            )));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::InvalidParameter("max_inner_iters must be positive".into()));
        }
        if self.eps_schedule.iter().any(|e| !(e.is_finite() && *e >= 0.0))
            || self.eps_schedule.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::InvalidParameter(format!(
                "eps schedule must be nonnegative and nonincreasing, got {:?}",
                self.eps_schedule
            )));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::InvalidParameter(format!("armijo_c must lie in (0,1), got {}", self.armijo_c)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidParameter(format!("backtrack must lie in (0,1), got {}", self.backtrack)));
        }
        Ok(())
    }

    pub fn schedule_for(&self, h: f64) -> Vec<f64> {
        if self.eps_schedule.is_empty() {
            default_eps_schedule(self.p, h)
        } else {
            self.eps_schedule.clone()
        }
    }
}

/// Regularization reached by the last stage of the default schedule for
/// `p < 2`. The gap between the two eigenvalue estimators scales like
/// `eps^2`, so this keeps it near roundoff.
pub const EPS_FINAL: f64 = 1e-8;

/// `[0]` for `p >= 2`. For `p < 2`, starts at `16 h^2` and divides by 4 per
/// stage until at or below [`EPS_FINAL`], with at least three stages.
pub fn default_eps_schedule(p: f64, h: f64) -> Vec<f64> {
    if p >= 2.0 {
        return vec![0.0];
    }
    let mut schedule = vec![16.0 * h * h];
    while schedule.len() < 3 || schedule[schedule.len() - 1] > EPS_FINAL {
        let next = schedule[schedule.len() - 1] / 4.0;
        schedule.push(next);
    }
    schedule
}

/// Nodewise `|u|^{p-2} u`, with `0 -> 0`.
pub fn signed_power(u: &GridFunction, p: f64) -> GridFunction {
    let values: Vec<f64> = u.values().iter().map(|&x| signed_pow(x, p)).collect();
    GridFunction::from_values(u.grid(), values).expect("signed power preserves zero trace")
}

#[inline]
pub(crate) fn signed_pow(x: f64, p: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.abs().powf(p - 2.0) * x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub eps: f64,
    pub iterations: usize,
    pub residual: f64,
    /// Objective value before the first step and after every accepted step.
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solution: GridFunction,
    pub iterations: usize,
    /// Sup-norm of the functional gradient at the final regularization.
    pub residual: f64,
    /// Effective stopping threshold.
    pub tolerance: f64,
    pub stages: Vec<StageReport>,
}

/// Minimizes `J_eps` starting from zero.
pub fn solve_step(f: &GridFunction, cfg: &SolverConfig) -> Result<SolveOutcome> {
    solve_step_from(f, &GridFunction::zeros(f.grid()), cfg)
}

/// Minimizes `J_eps` from a given initial guess (rescaled optimally before
/// descent starts).
pub fn solve_step_from(f: &GridFunction, initial: &GridFunction, cfg: &SolverConfig) -> Result<SolveOutcome> {
    cfg.validate()?;
    let grid = f.grid();
    if initial.values().len() != f.values().len() {
        return Err(Error::InvalidParameter("initial guess lives on a different grid".into()));
    }
    let ops = CellOps::new(grid);
    let fv = f.interior_values();
    let fsup = sup_abs(&fv);
    let tolerance = cfg.tol_grad * fsup.max(1.0);
    let schedule = cfg.schedule_for(grid.spacing());

    if fsup == 0.0 {
        return Ok(SolveOutcome {
            solution: GridFunction::zeros(grid),
            iterations: 0,
            residual: 0.0,
            tolerance,
            stages: Vec::new(),
        });
    }

    let mut problem = Problem::new(&ops, &fv, cfg);
    let mut v = initial.interior_values();
    if sup_abs(&v) == 0.0 {
        v = problem.poisson_guess()?;
    }
    problem.rescale(&mut v, schedule[0]);

    let mut stages = Vec::with_capacity(schedule.len());
    let mut iterations = 0;
    let last = schedule.len() - 1;
    for (k, &eps) in schedule.iter().enumerate() {
        // intermediate stages only need to land near the next minimizer
        let stage_tol = if k == last { tolerance } else { tolerance.max(1e-6 * fsup) };
        let budget = cfg.max_inner_iters.saturating_sub(iterations);
        let report = match cfg.method {
            DescentMethod::Newton => problem.newton(&mut v, eps, stage_tol, budget, k == last)?,
            DescentMethod::PreconditionedGradient => problem.gradient_descent(&mut v, eps, stage_tol, budget)?,
        };
        iterations += report.iterations;
        stages.push(report);
    }
    let residual = stages.last().map_or(0.0, |s| s.residual);
    Ok(SolveOutcome {
        solution: GridFunction::from_interior(grid, &v)?,
        iterations,
        residual,
        tolerance,
        stages,
    })
}

/// Consecutive Newton steps without measurable decrease before giving up.
const STALL_LIMIT: usize = 50;

struct Problem<'a> {
    ops: &'a CellOps,
    f: &'a [f64],
    cfg: &'a SolverConfig,
    p: f64,
}

impl<'a> Problem<'a> {
    fn new(ops: &'a CellOps, f: &'a [f64], cfg: &'a SolverConfig) -> Self {
        Self { ops, f, cfg, p: cfg.p }
    }

    /// Returns `(J, roundoff scale of J)`.
    fn objective(&self, v: &[f64], eps: f64) -> (f64, f64) {
        let (e, fo) = self.ops.objective_parts(v, self.f, self.p, eps);
        (e - fo, e.abs() + fo.abs())
    }

    /// Solution of the p = 2 problem with the same right-hand side.
    fn poisson_guess(&self) -> Result<Vec<f64>> {
        let n = self.ops.num_unknowns();
        let mut lap = BandedSym::zeros(n, self.ops.bandwidth());
        self.ops.hessian(&vec![0.0; n], 2.0, 0.0, &mut lap);
        let mut w: Vec<f64> = self.f.iter().map(|x| x * self.ops.volume()).collect();
        lap.cholesky()?.solve_in_place(&mut w);
        Ok(w)
    }

    /// Replaces `v` by its best multiple `t v`, `t >= 0`, under the
    /// homogeneous part of the energy, if that lowers `J`.
    fn rescale(&self, v: &mut [f64], eps: f64) {
        let (energy, forcing) = self.ops.objective_parts(v, self.f, self.p, 0.0);
        if !(energy > 0.0 && forcing > 0.0) {
            return;
        }
        // J(t v) = t^p E - t F
        let t = (forcing / (self.p * energy)).powf(1.0 / (self.p - 1.0));
        if !t.is_finite() {
            return;
        }
        let scaled: Vec<f64> = v.iter().map(|x| t * x).collect();
        if self.objective(&scaled, eps).0 < self.objective(v, eps).0 {
            v.copy_from_slice(&scaled);
        }
    }

    fn log(&self, it: usize, j: f64, res: f64) {
        if self.cfg.verbose && it % 1000 == 0 {
            eprintln!("inner iter {it} J {j:.12e} grad {res:.3e}");
        }
    }

    /// Backtracking along `dir` from step `t0`. Returns the accepted step and
    /// the new objective, or `None` if no step satisfies the Armijo test.
    fn line_search(&self, v: &[f64], dir: &[f64], slope: f64, t0: f64, eps: f64, j0: f64, scale: f64, trial: &mut Vec<f64>) -> Option<(f64, f64)> {
        let slack = 1e-14 * scale;
        let mut t = t0;
        for _ in 0..80 {
            trial.clear();
            trial.extend(v.iter().zip(dir).map(|(a, d)| a + t * d));
            let (j1, _) = self.objective(trial, eps);
            if j1.is_finite() && j1 <= j0 + self.cfg.armijo_c * t * slope + slack {
                return Some((t, j1));
            }
            t *= self.cfg.backtrack;
        }
        None
    }

    fn newton(&mut self, v: &mut Vec<f64>, eps: f64, tol: f64, budget: usize, polish: bool) -> Result<StageReport> {
        let n = v.len();
        let ops = self.ops;
        let mut grad = vec![0.0; n];
        let mut dir = vec![0.0; n];
        let mut trial = Vec::with_capacity(n);
        let (mut j, mut scale) = self.objective(v, eps);
        let mut history = vec![j];
        let mut shift_factor: f64 = if self.p > 2.0 { 1e-12 } else { 0.0 };
        // one extra step once the threshold is met, so that the result does
        // not depend on how far inside the threshold the iteration landed
        let mut polishing = false;
        let mut stalled = 0;

        for it in 0..=budget {
            ops.gradient(v, self.f, self.p, eps, &mut grad);
            let res = sup_abs(&grad);
            self.log(it, j, res);
            if res <= tol {
                if polishing || !polish || res <= 1e-3 * tol || it == budget {
                    return Ok(StageReport { eps, iterations: it, residual: res, objective: history });
                }
                polishing = true;
            }
            if it == budget {
                return Err(Error::NonConvergence { iterations: it, residual: res, tolerance: tol });
            }

            let factor = loop {
                let mut hess = BandedSym::zeros(n, ops.bandwidth());
                ops.hessian(v, self.p, eps, &mut hess);
                let max_diag = (0..n).map(|i| hess.diagonal(i)).fold(0.0, f64::max);
                let shift = shift_factor * max_diag + f64::MIN_POSITIVE;
                hess.add_diagonal(shift);
                match hess.cholesky() {
                    Ok(l) => break l,
                    Err(_) if shift_factor < 1e-2 => shift_factor = (shift_factor * 100.0).max(1e-12),
                    Err(e) => return Err(e),
                }
            };
            for (d, g) in dir.iter_mut().zip(&grad) {
                *d = -g;
            }
            factor.solve_in_place(&mut dir);
            let mut slope = dot(&grad, &dir);
            if !(slope < 0.0) || !slope.is_finite() {
                for (d, g) in dir.iter_mut().zip(&grad) {
                    *d = -g;
                }
                slope = -dot(&grad, &grad);
            }

            match self.line_search(v, &dir, slope, 1.0, eps, j, scale, &mut trial) {
                Some((t, j1)) => {
                    let moved = t * sup_abs(&dir);
                    if polishing {
                        ops.gradient(&trial, self.f, self.p, eps, &mut grad);
                        let after = sup_abs(&grad);
                        // a roundoff-level step may not help; then keep the old point
                        if after <= res {
                            std::mem::swap(v, &mut trial);
                            history.push(j1);
                            return Ok(StageReport { eps, iterations: it + 1, residual: after, objective: history });
                        }
                        return Ok(StageReport { eps, iterations: it, residual: res, objective: history });
                    }
                    stalled = if j - j1 <= 1e-15 * scale { stalled + 1 } else { 0 };
                    std::mem::swap(v, &mut trial);
                    j = j1;
                    scale = self.objective(v, eps).1;
                    history.push(j);
                    if moved <= 1e-17 * sup_abs(v) || stalled >= STALL_LIMIT {
                        return Err(Error::NonConvergence { iterations: it + 1, residual: res, tolerance: tol });
                    }
                }
                None if polishing => {
                    return Ok(StageReport { eps, iterations: it, residual: res, objective: history });
                }
                None => {
                    return Err(Error::NonConvergence { iterations: it + 1, residual: res, tolerance: tol });
                }
            }
        }
        unreachable!("loop returns at the budget")
    }

    fn gradient_descent(&mut self, v: &mut Vec<f64>, eps: f64, tol: f64, budget: usize) -> Result<StageReport> {
        let n = v.len();
        let ops = self.ops;
        // inverse of the p = 2 stencil diagonal, 2 dim / h^2 times h^dim
        let diag = {
            let mut lap = BandedSym::zeros(n, ops.bandwidth());
            ops.hessian(&vec![0.0; n], 2.0, 0.0, &mut lap);
            (0..n).map(|i| 1.0 / lap.diagonal(i)).collect::<Vec<f64>>()
        };
        let mut grad = vec![0.0; n];
        let mut prev_grad = vec![0.0; n];
        let mut prev_v = v.clone();
        let mut dir = vec![0.0; n];
        let mut trial = Vec::with_capacity(n);
        let (mut j, mut scale) = self.objective(v, eps);
        let mut history = vec![j];
        let mut step = 1.0;

        for it in 0..=budget {
            ops.gradient(v, self.f, self.p, eps, &mut grad);
            let res = sup_abs(&grad);
            self.log(it, j, res);
            if res <= tol {
                return Ok(StageReport { eps, iterations: it, residual: res, objective: history });
            }
            if it == budget {
                return Err(Error::NonConvergence { iterations: it, residual: res, tolerance: tol });
            }
            for i in 0..n {
                dir[i] = -diag[i] * grad[i];
            }
            if it > 0 {
                // two-point step in the preconditioned metric
                let mut sy = 0.0;
                let mut ss = 0.0;
                for i in 0..n {
                    let s = v[i] - prev_v[i];
                    let y = grad[i] - prev_grad[i];
                    sy += s * y;
                    ss += s * s / diag[i];
                }
                step = if sy > 0.0 { (ss / sy).min(1e6) } else { 1.0 };
            }
            let slope = dot(&grad, &dir);
            prev_v.copy_from_slice(v);
            prev_grad.copy_from_slice(&grad);
            match self.line_search(v, &dir, slope, step, eps, j, scale, &mut trial) {
                Some((_, j1)) => {
                    std::mem::swap(v, &mut trial);
                    j = j1;
                    scale = self.objective(v, eps).1;
                    history.push(j);
                }
                None => {
                    return Err(Error::NonConvergence { iterations: it + 1, residual: res, tolerance: tol });
                }
            }
        }
        unreachable!("loop returns at the budget")
    }
}
