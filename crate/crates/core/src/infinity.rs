//! Large-p behaviour: `lambda_p^{1/p}` against the reciprocal inradius, and
//! the sup-norm sequences of the un-normalized iteration.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::calculus::fmt_f64;
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::iteration::{inverse_iterate, CheckStatus, InitPolicy, IterationParams, IterationTrace};
use crate::solver::SolverConfig;

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub p: f64,
    /// `NaN` when the run failed to converge in the inner solver.
    pub lambda_r: f64,
    pub lambda_root: f64,
    /// `grad_sup / sup_norm` of the normalized iterate, per outer step.
    pub ratio_sequence: Vec<f64>,
    pub final_ratio: f64,
    pub converged: bool,
    pub error: Option<String>,
    pub trace: Option<IterationTrace>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub inradius_reciprocal: f64,
}

pub const SWEEP_COLUMNS: [&str; 6] = ["p", "lambda_R", "lambda_root", "final_ratio", "inradius_reciprocal", "converged"];

impl SweepResult {
    pub fn p_list(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.p).collect()
    }

    pub fn lambda_roots(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lambda_root).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SWEEP_COLUMNS)?;
        for e in &self.entries {
            w.write_record([
                fmt_f64(e.p),
                fmt_f64(e.lambda_r),
                fmt_f64(e.lambda_root),
                fmt_f64(e.final_ratio),
                fmt_f64(self.inradius_reciprocal),
                e.converged.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the iteration from the positive constant for every `p` in
/// `p_list` (strictly increasing, all above 2). Inner-solver failures are
/// recorded in the entry rather than aborting the sweep.
pub fn sweep(domain: &Domain, p_list: &[f64], params: &IterationParams, cfg: &SolverConfig) -> Result<SweepResult> {
    if p_list.is_empty() {
        return Err(Error::InvalidParameter("empty p list".into()));
    }
    if p_list.iter().any(|&p| !(p.is_finite() && p > 2.0)) {
        return Err(Error::InvalidParameter(format!("sweep needs every p > 2, got {p_list:?}")));
    }
    if p_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(format!("p list must be strictly increasing, got {p_list:?}")));
    }
    params.validate()?;

    let entries = p_list
        .par_iter()
        .map(|&p| {
            let cfg = SolverConfig { p, ..cfg.clone() };
            match inverse_iterate(domain, &InitPolicy::PositiveConstant, params, &cfg) {
                Ok(run) => {
                    let trace = run.trace;
                    let ratio_sequence = trace.ratio_sequence();
                    Ok(SweepEntry {
                        p,
                        lambda_r: trace.lambda_r,
                        lambda_root: trace.lambda_r.powf(1.0 / p),
                        final_ratio: ratio_sequence.last().copied().unwrap_or(f64::NAN),
                        ratio_sequence,
                        converged: trace.converged,
                        error: None,
                        trace: Some(trace),
                    })
                }
                Err(e @ Error::NonConvergence { .. }) => Ok(SweepEntry {
                    p,
                    lambda_r: f64::NAN,
                    lambda_root: f64::NAN,
                    ratio_sequence: Vec::new(),
                    final_ratio: f64::NAN,
                    converged: false,
                    error: Some(e.to_string()),
                    trace: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SweepResult {
        entries,
        inradius_reciprocal: 1.0 / domain.inradius(),
    })
}

/// Smallest `p` for which [`monotone_supnorm_check`] applies.
pub const SUPNORM_MIN_P: f64 = 32.0;
/// Relative growth allowed per step, and the stabilization band for the
/// last two ratios.
pub const SUPNORM_SLACK: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupNormReport {
    pub status: CheckStatus,
    /// Largest one-step relative growth of `L^k |D v_k|_inf`.
    pub gradient_growth: f64,
    /// Largest one-step relative growth of `L^k |v_k|_inf`.
    pub value_growth: f64,
    /// Relative change between the last two sup-norm ratios.
    pub ratio_change: f64,
    pub note: String,
}

/// Checks that `L^k |D v_k|_inf` and `L^k |v_k|_inf` are nonincreasing up to
/// [`SUPNORM_SLACK`] per step, where `v_k` are the un-normalized iterates
/// rebuilt from the norm factors and `L = lambda_inf`, and that their ratio
/// has settled.
pub fn monotone_supnorm_check(trace: &IterationTrace, lambda_inf: f64) -> SupNormReport {
    let skip = |note: String| SupNormReport {
        status: CheckStatus::Skipped,
        gradient_growth: f64::NAN,
        value_growth: f64::NAN,
        ratio_change: f64::NAN,
        note,
    };
    if trace.p < SUPNORM_MIN_P {
        return skip(format!("p = {} is below {SUPNORM_MIN_P}; outside the large-p regime", trace.p));
    }
    if trace.steps.len() < 3 {
        return skip("fewer than 3 steps".into());
    }

    // logs of L^k C_k times the sup norms, C_k the product of norm factors
    let mut log_scale = 0.0;
    let mut grads = Vec::with_capacity(trace.steps.len());
    let mut values = Vec::with_capacity(trace.steps.len());
    for s in &trace.steps {
        log_scale += lambda_inf.ln() + s.norm_factor.ln();
        grads.push(log_scale + s.grad_sup.ln());
        values.push(log_scale + s.sup_norm.ln());
    }
    let growth = |seq: &[f64]| seq.windows(2).map(|w| (w[1] - w[0]).exp() - 1.0).fold(f64::NEG_INFINITY, f64::max);
    let gradient_growth = growth(&grads);
    let value_growth = growth(&values);
    let ratios = trace.ratio_sequence();
    let n = ratios.len();
    let ratio_change = (ratios[n - 1] - ratios[n - 2]).abs() / ratios[n - 2];

    let ok = gradient_growth <= SUPNORM_SLACK && value_growth <= SUPNORM_SLACK && ratio_change <= SUPNORM_SLACK;
    SupNormReport {
        status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
        gradient_growth,
        value_growth,
        ratio_change,
        note: String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainSpec;
    use crate::iteration::StepRecord;

    fn record(k: usize, norm_factor: f64, sup_norm: f64, grad_sup: f64) -> StepRecord {
        StepRecord {
            k,
            rayleigh: 1.0,
            norm_ratio: 1.0,
            q: 1.0,
            sup_norm,
            grad_sup,
            norm_factor,
            inner_iters: 1,
        }
    }

    fn trace(p: f64, steps: Vec<StepRecord>) -> IterationTrace {
        let summary = crate::iteration::TraceSummary {
            p,
            h: 0.1,
            lambda_r: 1.0,
            lambda_q: 1.0,
            mu: 1.0,
            steps: steps.len(),
            converged: true,
            tol_grad: 1e-10,
            sign_definite: true,
            barrier: None,
            inradius_reciprocal: None,
        };
        IterationTrace::from_parts(&summary, steps)
    }

    #[test]
    fn supnorm_check_guards_small_p() {
        let t = trace(2.5, (1..5).map(|k| record(k, 0.4, 1.0, 2.0)).collect());
        assert_eq!(monotone_supnorm_check(&t, 2.0).status, CheckStatus::Skipped);
    }

    #[test]
    fn supnorm_check_on_constant_factors() {
        // L * rho = 0.9 < 1: both sequences shrink geometrically
        let t = trace(64.0, (1..6).map(|k| record(k, 0.45, 1.0, 2.1)).collect());
        let r = monotone_supnorm_check(&t, 2.0);
        assert_eq!(r.status, CheckStatus::Pass);
        assert!((r.gradient_growth - (0.9f64 - 1.0)).abs() < 1e-12);
        assert!(r.ratio_change.abs() < 1e-15);
        // L * rho = 1.1: growth beyond the slack
        let t = trace(64.0, (1..6).map(|k| record(k, 0.55, 1.0, 2.1)).collect());
        assert_eq!(monotone_supnorm_check(&t, 2.0).status, CheckStatus::Fail);
    }

    #[test]
    fn supnorm_check_flags_unsettled_ratio() {
        let mut steps: Vec<StepRecord> = (1..6).map(|k| record(k, 0.45, 1.0, 2.1)).collect();
        steps[4].grad_sup = 1.8;
        assert_eq!(monotone_supnorm_check(&trace(64.0, steps), 2.0).status, CheckStatus::Fail);
    }

    #[test]
    fn rejects_bad_p_lists() {
        let d = Domain::new(DomainSpec::unit_interval(), 16).unwrap();
        let params = IterationParams::default();
        let cfg = SolverConfig::default();
        assert!(sweep(&d, &[], &params, &cfg).is_err());
        assert!(sweep(&d, &[1.5, 4.0], &params, &cfg).is_err());
        assert!(sweep(&d, &[8.0, 4.0], &params, &cfg).is_err());
    }

    #[test]
    fn interval_sweep_trends_to_two() {
        let d = Domain::new(DomainSpec::unit_interval(), 256).unwrap();
        let res = sweep(&d, &[4.0, 8.0, 16.0, 32.0], &IterationParams::default(), &SolverConfig::default()).unwrap();
        assert_eq!(res.inradius_reciprocal, 2.0);
        assert_eq!(res.p_list(), vec![4.0, 8.0, 16.0, 32.0]);
        let roots = res.lambda_roots();
        for w in roots.windows(2) {
            assert!(w[1] < w[0] * 1.02, "{roots:?}");
        }
        let dist: Vec<f64> = roots.iter().map(|r| (r - 2.0).abs()).collect();
        assert!(dist.windows(2).all(|w| w[1] < w[0]), "{roots:?}");
        assert!(dist[3] < 0.15 * 2.0);
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("p,lambda_R,lambda_root,final_ratio,inradius_reciprocal,converged\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
