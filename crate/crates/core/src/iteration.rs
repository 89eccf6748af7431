//! Outer inverse iteration `u_k = T(|u_{k-1}|^{p-2} u_{k-1})`, normalized in
//! `L^p` after every step, with trace recording and the monotonicity checks.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{fmt_f64, grad_sup, log_p_norm_pow, rayleigh_quotient, sup_norm, GridFunction};
use crate::error::{Error, Result};
use crate::geometry::{Domain, DomainSpec, Grid};
use crate::solver::{signed_power, solve_step_from, SolverConfig};

#[derive(Debug, Clone)]
pub enum InitPolicy {
    /// `u_0 = 1` at every interior node.
    PositiveConstant,
    /// Independent uniform values in `[0.1, 1)` from a seeded generator.
    RandomPositive(u64),
    Custom(GridFunction),
}

impl InitPolicy {
    pub fn build(&self, grid: &Arc<Grid>) -> Result<GridFunction> {
        match self {
            InitPolicy::PositiveConstant => GridFunction::from_fn(grid, |_| 1.0),
            InitPolicy::RandomPositive(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                GridFunction::from_fn(grid, |_| rng.gen_range(0.1..1.0))
            }
            InitPolicy::Custom(u) => {
                if u.values().len() != grid.num_nodes() {
                    return Err(Error::InvalidParameter("custom initial state lives on a different grid".into()));
                }
                if u.is_zero() {
                    return Err(Error::InvalidParameter("custom initial state is identically zero".into()));
                }
                Ok(GridFunction::from_values(grid, u.values().to_vec())?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationParams {
    pub max_steps: usize,
    /// Stop once `|R_k - R_{k-1}| <= tol_outer * R_k`.
    pub tol_outer: f64,
    /// The stopping test is not applied before this many steps.
    pub min_steps: usize,
    /// Keep every normalized iterate in the run result.
    pub record_iterates: bool,
}

impl Default for IterationParams {
    fn default() -> Self {
        Self {
            max_steps: 5000,
            tol_outer: 1e-12,
            min_steps: 3,
            record_iterates: false,
        }
    }
}

impl IterationParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 2 {
            return Err(Error::InvalidParameter(format!("max_steps must be at least 2, got {}", self.max_steps)));
        }
        if !(self.tol_outer.is_finite() && self.tol_outer > 0.0) {
            return Err(Error::InvalidParameter(format!("tol_outer must be positive, got {}", self.tol_outer)));
        }
        Ok(())
    }
}

/// One outer step. `rayleigh`, `sup_norm` and `grad_sup` refer to the
/// normalized iterate `u_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub rayleigh: f64,
    /// `||u_{k-1}||^p / ||T(u_{k-1}^{p-1})||^p`.
    pub norm_ratio: f64,
    /// `norm_ratio^{1 - 1/p}`.
    pub q: f64,
    pub sup_norm: f64,
    pub grad_sup: f64,
    /// `||T(u_{k-1}^{p-1})||_p`, the factor divided out by the normalization.
    pub norm_factor: f64,
    pub inner_iters: usize,
}

impl StepRecord {
    pub fn sup_ratio(&self) -> f64 {
        self.grad_sup / self.sup_norm
    }
}

/// Data for the barrier bound `sup|u_1| <= |w|_inf sup|u_0|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierRecord {
    pub w_sup: f64,
    pub u0_sup: f64,
    pub u1_sup: f64,
}

impl BarrierRecord {
    pub fn holds(&self) -> bool {
        self.u1_sup < self.w_sup * self.u0_sup
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub p: f64,
    pub h: f64,
    pub tol_grad: f64,
    /// Whether `u_0` had one sign on the interior.
    pub sign_definite: bool,
    pub steps: Vec<StepRecord>,
    pub lambda_r: f64,
    pub lambda_q: f64,
    pub mu: f64,
    pub converged: bool,
    pub barrier: Option<BarrierRecord>,
    /// `1 / inradius` of the domain the trace was computed on.
    pub inradius_reciprocal: Option<f64>,
}

impl IterationTrace {
    fn from_steps(p: f64, h: f64, tol_grad: f64, sign_definite: bool, steps: Vec<StepRecord>, converged: bool, barrier: Option<BarrierRecord>) -> Self {
        let last = steps.last().copied();
        let lambda_r = last.map_or(f64::NAN, |s| s.rayleigh);
        let lambda_q = last.map_or(f64::NAN, |s| s.q);
        Self {
            p,
            h,
            tol_grad,
            sign_definite,
            steps,
            lambda_r,
            lambda_q,
            mu: lambda_r.powf(1.0 / (p - 1.0)),
            converged,
            barrier,
            inradius_reciprocal: None,
        }
    }

    pub fn ratio_sequence(&self) -> Vec<f64> {
        self.steps.iter().map(StepRecord::sup_ratio).collect()
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            p: self.p,
            h: self.h,
            lambda_r: self.lambda_r,
            lambda_q: self.lambda_q,
            mu: self.mu,
            steps: self.steps.len(),
            converged: self.converged,
            tol_grad: self.tol_grad,
            sign_definite: self.sign_definite,
            barrier: self.barrier,
            inradius_reciprocal: self.inradius_reciprocal,
        }
    }

    /// Rebuilds a trace from its saved parts. Summary estimators are taken
    /// from the step records, so an edited CSV is checked as edited.
    pub fn from_parts(summary: &TraceSummary, steps: Vec<StepRecord>) -> Self {
        let mut trace = Self::from_steps(
            summary.p,
            summary.h,
            summary.tol_grad,
            summary.sign_definite,
            steps,
            summary.converged,
            summary.barrier,
        );
        trace.inradius_reciprocal = summary.inradius_reciprocal;
        trace
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRACE_COLUMNS)?;
        for s in &self.steps {
            w.write_record([
                s.k.to_string(),
                fmt_f64(s.rayleigh),
                fmt_f64(s.norm_ratio),
                fmt_f64(s.q),
                fmt_f64(s.sup_norm),
                fmt_f64(s.grad_sup),
                fmt_f64(s.norm_factor),
                s.inner_iters.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        if headers.iter().map(str::trim).ne(TRACE_COLUMNS.iter().copied()) {
            return Err(Error::Parse(format!("unexpected trace header {:?}", headers)));
        }
        let mut steps = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: column {}: {e}", line + 1, TRACE_COLUMNS[i])))
            };
            let int = |i: usize| -> Result<usize> {
                rec[i]
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("row {}: column {}: {e}", line + 1, TRACE_COLUMNS[i])))
            };
            steps.push(StepRecord {
                k: int(0)?,
                rayleigh: num(1)?,
                norm_ratio: num(2)?,
                q: num(3)?,
                sup_norm: num(4)?,
                grad_sup: num(5)?,
                norm_factor: num(6)?,
                inner_iters: int(7)?,
            });
        }
        Ok(steps)
    }

    /// Writes `PREFIX.trace.csv` and `PREFIX.summary.json`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        self.write_csv(BufWriter::new(File::create(with_suffix(prefix, "trace.csv"))?))?;
        let mut out = BufWriter::new(File::create(with_suffix(prefix, "summary.json"))?);
        serde_json::to_writer_pretty(&mut out, &self.summary())?;
        writeln!(out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(prefix: impl AsRef<Path>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let steps = Self::read_csv(BufReader::new(File::open(with_suffix(prefix, "trace.csv"))?))?;
        let summary: TraceSummary = serde_json::from_reader(BufReader::new(File::open(with_suffix(prefix, "summary.json"))?))?;
        Ok(Self::from_parts(&summary, steps))
    }
}

pub const TRACE_COLUMNS: [&str; 8] = ["k", "R_k", "N_k", "Q_k", "sup_norm", "grad_sup", "norm_factor", "inner_iters"];

/// `PREFIX.suffix`, keeping any dots already in the prefix.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub p: f64,
    pub h: f64,
    #[serde(rename = "lambda_R")]
    pub lambda_r: f64,
    #[serde(rename = "lambda_Q")]
    pub lambda_q: f64,
    pub mu: f64,
    pub steps: usize,
    pub converged: bool,
    #[serde(default = "default_tol_grad")]
    pub tol_grad: f64,
    #[serde(default = "yes")]
    pub sign_definite: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barrier: Option<BarrierRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inradius_reciprocal: Option<f64>,
}

fn default_tol_grad() -> f64 {
    SolverConfig::default().tol_grad
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct IterationRun {
    pub trace: IterationTrace,
    /// Final normalized iterate.
    pub state: GridFunction,
    /// Normalized `u_0, u_1, ...` when requested.
    pub iterates: Vec<GridFunction>,
}

/// Runs the normalized inverse iteration on `domain`.
pub fn inverse_iterate(domain: &Domain, init: &InitPolicy, params: &IterationParams, cfg: &SolverConfig) -> Result<IterationRun> {
    params.validate()?;
    cfg.validate()?;
    let p = cfg.p;
    let grid = domain.grid();
    let u0 = init.build(grid)?;
    let interior = u0.interior_values();
    let sign_definite = interior.iter().all(|&x| x > 0.0) || interior.iter().all(|&x| x < 0.0);

    // normalizing u_0 first makes the run invariant under scaling of the init
    let log_norm0 = log_p_norm_pow(&u0, p);
    if !log_norm0.is_finite() {
        return Err(Error::DegenerateIterate { step: 0 });
    }
    let mut u = u0.scaled((-log_norm0 / p).exp());

    let mut iterates = Vec::new();
    if params.record_iterates {
        iterates.push(u.clone());
    }
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut barrier = None;
    let mut converged = false;
    let mut guess = GridFunction::zeros(grid);

    for k in 1..=params.max_steps {
        let rhs = signed_power(&u, p);
        let outcome = solve_step_from(&rhs, &guess, cfg)?;
        let raw = outcome.solution;
        if k == 1 {
            barrier = Some(BarrierRecord {
                w_sup: barrier_sup(domain.spec(), grid, p),
                u0_sup: sup_norm(&u),
                u1_sup: sup_norm(&raw),
            });
        }
        // ||u_{k-1}||_p = 1, so N_k = 1 / ||raw||^p
        let log_norm = log_p_norm_pow(&raw, p);
        if !log_norm.is_finite() {
            return Err(Error::DegenerateIterate { step: k });
        }
        let norm_factor = (log_norm / p).exp();
        if !(norm_factor > 0.0 && norm_factor.is_finite()) {
            return Err(Error::DegenerateIterate { step: k });
        }
        let next = raw.scaled(1.0 / norm_factor);
        let rayleigh = rayleigh_quotient(&next, p).map_err(|_| Error::DegenerateIterate { step: k })?;
        let record = StepRecord {
            k,
            rayleigh,
            norm_ratio: (-log_norm).exp(),
            q: (-log_norm * (p - 1.0) / p).exp(),
            sup_norm: sup_norm(&next),
            grad_sup: grad_sup(&next),
            norm_factor,
            inner_iters: outcome.iterations,
        };
        if cfg.verbose {
            eprintln!("outer step {k} R {:.15e} inner {}", rayleigh, outcome.iterations);
        }
        let previous = steps.last().map(|s| s.rayleigh);
        steps.push(record);
        u = next;
        guess = u.clone();
        if params.record_iterates {
            iterates.push(u.clone());
        }
        if let Some(prev) = previous {
            if k >= params.min_steps && (rayleigh - prev).abs() <= params.tol_outer * rayleigh {
                converged = true;
                break;
            }
        }
    }

    let mut trace = IterationTrace::from_steps(p, grid.spacing(), cfg.tol_grad, sign_definite, steps, converged, barrier);
    trace.inradius_reciprocal = Some(1.0 / domain.inradius());
    Ok(IterationRun {
        trace,
        state: u,
        iterates,
    })
}

/// Exterior point used by the barrier `w(x) = |x - y|^q / (q dim^{1/(p-1)})`:
/// distance `h` outside the midpoint of the longest side (for masks, of the
/// bottom side of the bounding box).
pub fn barrier_point(spec: &DomainSpec, grid: &Grid) -> [f64; 2] {
    let h = grid.spacing();
    match spec {
        DomainSpec::Interval { a, .. } => [a - h, 0.0],
        DomainSpec::Rectangle { ax, bx, ay, by } => {
            if bx - ax >= by - ay {
                [0.5 * (ax + bx), ay - h]
            } else {
                [ax - h, 0.5 * (ay + by)]
            }
        }
        DomainSpec::Mask(_) => {
            let (lo, hi) = spec.bounding_box();
            [0.5 * (lo[0] + hi[0]), lo[1] - h]
        }
    }
}

/// `max w` over the nodes of the closed domain.
pub fn barrier_sup(spec: &DomainSpec, grid: &Grid, p: f64) -> f64 {
    let y = barrier_point(spec, grid);
    let q = p / (p - 1.0);
    let scale = q * (grid.dim() as f64).powf(1.0 / (p - 1.0));
    (0..grid.num_nodes())
        .filter(|&n| grid.in_closure(n))
        .map(|n| {
            let x = grid.coords(n);
            (x[0] - y[0]).hypot(x[1] - y[1]).powf(q) / scale
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Claim {
    /// `R_{k+1} <= R_k`.
    RayleighNonincreasing,
    /// `N_{k+1} <= N_k`.
    NormRatioNonincreasing,
    /// `R_k >= lambda_R` and `N_k >= lambda_R^{p/(p-1)}`.
    LowerBounds,
    /// `mu^p E_{k+1} <= E_k` for the un-normalized energies.
    ScaledEnergy,
}

impl Claim {
    pub const ALL: [Claim; 4] = [
        Claim::RayleighNonincreasing,
        Claim::NormRatioNonincreasing,
        Claim::LowerBounds,
        Claim::ScaledEnergy,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Claim::RayleighNonincreasing => "a",
            Claim::NormRatioNonincreasing => "b",
            Claim::LowerBounds => "c",
            Claim::ScaledEnergy => "d",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Claim::RayleighNonincreasing => "R_k nonincreasing",
            Claim::NormRatioNonincreasing => "N_k nonincreasing",
            Claim::LowerBounds => "R_k, N_k bounded below by the limit",
            Claim::ScaledEnergy => "mu^p-scaled energies nonincreasing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClaimResult {
    pub claim: Claim,
    pub status: CheckStatus,
    /// Largest relative violation `(lhs - rhs) / |rhs|`; nonpositive when
    /// the inequality holds everywhere.
    pub worst_margin: f64,
    /// Step at which the worst margin occurred.
    pub worst_step: Option<usize>,
    /// First step at which the inequality failed beyond the slack.
    pub offending_step: Option<usize>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub slack: f64,
    pub claims: Vec<ClaimResult>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.claims.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn all_passed(&self) -> bool {
        self.claims.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn get(&self, claim: Claim) -> &ClaimResult {
        self.claims.iter().find(|c| c.claim == claim).expect("every claim is reported")
    }
}

/// Default relative slack for [`check_monotonicity`].
pub fn default_slack(trace: &IterationTrace) -> f64 {
    100.0 * trace.tol_grad
}

struct Tally {
    claim: Claim,
    slack: f64,
    worst: f64,
    worst_step: Option<usize>,
    first_bad: Option<usize>,
}

impl Tally {
    fn new(claim: Claim, slack: f64) -> Self {
        Self {
            claim,
            slack,
            worst: f64::NEG_INFINITY,
            worst_step: None,
            first_bad: None,
        }
    }

    /// Records `lhs <= rhs` at step `k`.
    fn le(&mut self, k: usize, lhs: f64, rhs: f64) {
        let margin = (lhs - rhs) / rhs.abs();
        let margin = if margin.is_nan() { f64::INFINITY } else { margin };
        if margin > self.worst {
            self.worst = margin;
            self.worst_step = Some(k);
        }
        if margin > self.slack && self.first_bad.is_none() {
            self.first_bad = Some(k);
        }
    }

    fn finish(self) -> ClaimResult {
        let status = if self.first_bad.is_some() { CheckStatus::Fail } else { CheckStatus::Pass };
        ClaimResult {
            claim: self.claim,
            status,
            worst_margin: self.worst,
            worst_step: self.worst_step,
            offending_step: self.first_bad,
            note: String::new(),
        }
    }
}

fn skipped(claim: Claim, note: &str) -> ClaimResult {
    ClaimResult {
        claim,
        status: CheckStatus::Skipped,
        worst_margin: f64::NAN,
        worst_step: None,
        offending_step: None,
        note: note.to_string(),
    }
}

/// Checks claims (a) through (d) with relative `slack`. Steps are reported
/// by the index of the later term of each inequality.
pub fn check_monotonicity(trace: &IterationTrace, slack: f64) -> MonotonicityReport {
    let steps = &trace.steps;
    if steps.len() < 3 {
        return MonotonicityReport {
            slack,
            claims: Claim::ALL.iter().map(|&c| skipped(c, "fewer than 3 steps")).collect(),
        };
    }
    let p = trace.p;
    let lambda = trace.lambda_r;
    let mu = trace.mu;

    let mut a = Tally::new(Claim::RayleighNonincreasing, slack);
    let mut b = Tally::new(Claim::NormRatioNonincreasing, slack);
    let mut d = Tally::new(Claim::ScaledEnergy, slack);
    for w in steps.windows(2) {
        let (s0, s1) = (&w[0], &w[1]);
        a.le(s1.k, s1.rayleigh, s0.rayleigh);
        b.le(s1.k, s1.norm_ratio, s0.norm_ratio);
        // E_k = C_k^p R_k with C_k the product of norm factors up to k
        let lhs = (p * (mu * s1.norm_factor).ln()).exp() * s1.rayleigh;
        d.le(s1.k, lhs, s0.rayleigh);
    }

    let c = if trace.sign_definite {
        let mut c = Tally::new(Claim::LowerBounds, slack);
        let n_bound = lambda.powf(p / (p - 1.0));
        for s in steps {
            c.le(s.k, lambda, s.rayleigh);
            c.le(s.k, n_bound, s.norm_ratio);
        }
        c.finish()
    } else {
        skipped(Claim::LowerBounds, "sign-changing initial state")
    };

    MonotonicityReport {
        slack,
        claims: vec![a.finish(), b.finish(), c, d.finish()],
    }
}

/// Relative gap `|lambda_R - lambda_Q| / lambda_R` between the Rayleigh
/// estimator and the norm-ratio estimator.
pub fn consistency_estimators(trace: &IterationTrace) -> f64 {
    (trace.lambda_r - trace.lambda_q).abs() / trace.lambda_r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{p_norm_pow, rayleigh_quotient};
    use crate::geometry::DomainSpec;

    fn domain(spec: DomainSpec, n: usize) -> Domain {
        Domain::new(spec, n).unwrap()
    }

    fn run(d: &Domain, p: f64, init: InitPolicy) -> IterationRun {
        inverse_iterate(d, &init, &IterationParams::default(), &SolverConfig::new(p)).unwrap()
    }

    #[test]
    fn random_init_is_positive_and_seeded() {
        let d = domain(DomainSpec::unit_square(), 8);
        let a = InitPolicy::RandomPositive(3).build(d.grid()).unwrap();
        let b = InitPolicy::RandomPositive(3).build(d.grid()).unwrap();
        let c = InitPolicy::RandomPositive(4).build(d.grid()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.interior_values().iter().all(|&x| (0.1..1.0).contains(&x)));
    }

    #[test]
    fn p2_matches_closed_form_spectrum() {
        let n = 63;
        let d = domain(DomainSpec::unit_interval(), n);
        let h = d.grid().spacing();
        let out = run(&d, 2.0, InitPolicy::PositiveConstant);
        let exact = 4.0 / (h * h) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
        assert!(out.trace.converged);
        assert!((out.trace.lambda_r - exact).abs() / exact < 1e-10);
        assert!(consistency_estimators(&out.trace) < 1e-10);
        assert!((out.trace.mu - out.trace.lambda_r).abs() < 1e-12 * exact);
    }

    #[test]
    fn iterates_stay_normalized_and_positive() {
        let d = domain(DomainSpec::unit_square(), 12);
        let params = IterationParams {
            record_iterates: true,
            ..IterationParams::default()
        };
        for p in [1.5, 3.0] {
            let out = inverse_iterate(&d, &InitPolicy::RandomPositive(1), &params, &SolverConfig::new(p)).unwrap();
            assert_eq!(out.iterates.len(), out.trace.steps.len() + 1);
            for u in &out.iterates {
                assert!((p_norm_pow(u, p) - 1.0).abs() < 1e-12);
                assert!(u.values().iter().all(|&x| x >= -100.0 * 1e-10));
            }
            let report = check_monotonicity(&out.trace, default_slack(&out.trace));
            assert!(report.all_passed(), "{report:?}");
            assert!(out.trace.barrier.unwrap().holds());
            assert!(consistency_estimators(&out.trace) < 1e-6);
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let d = domain(DomainSpec::unit_interval(), 31);
        let g = d.grid();
        let h = g.spacing();
        // discrete sine is the exact p = 2 ground state of the 3-point stencil
        let u = GridFunction::from_fn(g, |[x, _]| (std::f64::consts::PI * x).sin()).unwrap();
        let params = IterationParams {
            max_steps: 10,
            min_steps: 10,
            ..IterationParams::default()
        };
        let out = inverse_iterate(&d, &InitPolicy::Custom(u.clone()), &params, &SolverConfig::new(2.0)).unwrap();
        assert_eq!(out.trace.steps.len(), 10);
        let r0 = rayleigh_quotient(&u, 2.0).unwrap();
        let exact = 4.0 / (h * h) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
        assert!((r0 - exact).abs() / exact < 1e-12);
        for s in &out.trace.steps {
            assert!((s.rayleigh - r0).abs() / r0 < 1e-10);
        }
        let report = check_monotonicity(&out.trace, 1e-10);
        assert!(report.all_passed(), "{report:?}");
        assert!(consistency_estimators(&out.trace) < 1e-10);
    }

    #[test]
    fn scaling_and_negation() {
        let d = domain(DomainSpec::unit_square(), 10);
        let g = d.grid();
        let base = InitPolicy::RandomPositive(9).build(g).unwrap();
        let params = IterationParams {
            record_iterates: true,
            ..IterationParams::default()
        };
        for p in [1.5, 3.0] {
            let cfg = SolverConfig::new(p);
            let r = |u: GridFunction| inverse_iterate(&d, &InitPolicy::Custom(u), &params, &cfg).unwrap();
            let a = r(base.clone());
            let neg = r(base.scaled(-1.0));
            for (x, y) in a.iterates.iter().zip(&neg.iterates) {
                assert!(x.values().iter().zip(y.values()).all(|(s, t)| *s == -*t));
            }
            let big = r(base.scaled(7.0));
            for (s, t) in a.trace.steps.iter().zip(&big.trace.steps) {
                assert!((s.rayleigh - t.rayleigh).abs() <= 1e-12 * s.rayleigh);
                assert!((s.norm_ratio - t.norm_ratio).abs() <= 1e-12 * s.norm_ratio);
            }
        }
    }

    fn synthetic(rs: &[f64]) -> IterationTrace {
        // p = 2 trace with N_k = R_k^2 and exact fixed-point norm factors
        let steps = rs
            .iter()
            .enumerate()
            .map(|(i, &r)| StepRecord {
                k: i + 1,
                rayleigh: r,
                norm_ratio: r * r,
                q: r,
                sup_norm: 1.0,
                grad_sup: 2.0,
                norm_factor: 1.0 / r,
                inner_iters: 1,
            })
            .collect();
        IterationTrace::from_steps(2.0, 0.1, 1e-10, true, steps, true, None)
    }

    #[test]
    fn checker_flags_perturbed_step() {
        let mut rs: Vec<f64> = (0..8).map(|k| 10.0 + 0.5f64.powi(k)).collect();
        assert!(check_monotonicity(&synthetic(&rs), 1e-8).all_passed());
        rs[4] += 0.2; // R_5
        let report = check_monotonicity(&synthetic(&rs), 1e-8);
        let a = report.get(Claim::RayleighNonincreasing);
        assert_eq!(a.status, CheckStatus::Fail);
        assert_eq!(a.offending_step, Some(5));
        assert!(!report.passed());
    }

    #[test]
    fn checker_skips_short_traces() {
        let report = check_monotonicity(&synthetic(&[3.0, 2.0]), 1e-8);
        assert!(report.claims.iter().all(|c| c.status == CheckStatus::Skipped));
    }

    #[test]
    fn trace_round_trip() {
        let d = domain(DomainSpec::unit_interval(), 20);
        let out = run(&d, 3.0, InitPolicy::PositiveConstant);
        let dir = std::env::temp_dir().join(format!("pground-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let prefix = dir.join("run.v1");
        out.trace.save(&prefix).unwrap();
        assert!(dir.join("run.v1.trace.csv").exists());
        let back = IterationTrace::load(&prefix).unwrap();
        assert_eq!(back, out.trace);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn barrier_geometry() {
        let d = domain(DomainSpec::rectangle(0.0, 2.0, 0.0, 1.0).unwrap(), 4);
        let g = d.grid();
        let y = barrier_point(d.spec(), g);
        assert_eq!(y, [1.0, -0.25]);
        // farthest closure node is a top corner
        let q = 2.0;
        let far = (1.0f64 + 1.25 * 1.25).sqrt().powf(q) / (q * 2.0);
        assert!((barrier_sup(d.spec(), g, 2.0) - far).abs() < 1e-14);
        let i = domain(DomainSpec::unit_interval(), 3);
        assert_eq!(barrier_point(i.spec(), i.grid()), [-0.25, 0.0]);
    }

    #[test]
    fn rejects_bad_params() {
        let d = domain(DomainSpec::unit_interval(), 5);
        let cfg = SolverConfig::new(2.0);
        let bad = IterationParams {
            max_steps: 1,
            ..IterationParams::default()
        };
        assert!(inverse_iterate(&d, &InitPolicy::PositiveConstant, &bad, &cfg).is_err());
        let zero = GridFunction::zeros(d.grid());
        assert!(inverse_iterate(&d, &InitPolicy::Custom(zero), &IterationParams::default(), &cfg).is_err());
    }
}
