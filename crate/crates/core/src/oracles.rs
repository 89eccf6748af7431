//! Reference computations that share no solver code with the inverse
//! iteration: a linear eigensolver for p = 2, a 1D shooting method for
//! general p, and multistart Rayleigh minimization on tiny grids.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calculus::{CellOps, GridFunction};
use crate::error::{Error, Result};
use crate::geometry::{Domain, Grid};
use crate::linalg::{conjugate_gradient, dot, sup_abs};
use crate::solver::signed_pow;

/// Largest interior size accepted by [`lambda2_reference`].
pub const REFERENCE_LIMIT: usize = 20_000;
/// Up to this size the reference value is cross-checked by a full dense
/// eigendecomposition.
pub const DENSE_LIMIT: usize = 400;
/// Largest interior size accepted by [`rayleigh_bruteforce`].
pub const BRUTEFORCE_LIMIT: usize = 12;

const MAX_POWER_STEPS: usize = 2000;

/// Nearest-neighbour graph Laplacian on interior nodes, `2 dim / h^2` on the
/// diagonal and `-1/h^2` per interior neighbour.
struct Stencil {
    diag: f64,
    off: f64,
    neighbours: Vec<Vec<usize>>,
}

impl Stencil {
    fn new(grid: &Grid) -> Self {
        let h = grid.spacing();
        let (nx, ny) = grid.node_counts();
        let neighbours = grid
            .interior()
            .iter()
            .map(|&node| {
                let (i, j) = grid.node_ij(node);
                let mut around = vec![(i - 1, j), (i + 1, j)];
                if grid.dim() == 2 {
                    around.extend([(i, j - 1), (i, j + 1)]);
                }
                around
                    .into_iter()
                    .filter(|&(a, b)| a < nx && b < ny)
                    .filter_map(|(a, b)| grid.interior_slot(grid.node_index(a, b)))
                    .collect()
            })
            .collect();
        Self {
            diag: 2.0 * grid.dim() as f64 / (h * h),
            off: -1.0 / (h * h),
            neighbours,
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, nb) in self.neighbours.iter().enumerate() {
            y[i] = self.diag * x[i] + self.off * nb.iter().map(|&j| x[j]).sum::<f64>();
        }
    }

    fn dense(&self) -> DMatrix<f64> {
        let n = self.neighbours.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, nb) in self.neighbours.iter().enumerate() {
            m[(i, i)] = self.diag;
            for &j in nb {
                m[(i, j)] = self.off;
            }
        }
        m
    }
}

/// Smallest eigenvalue of the discrete Dirichlet Laplacian on `domain` and a
/// positive eigenvector scaled to unit sup-norm.
///
/// Inverse power iteration with conjugate-gradient solves; for at most
/// [`DENSE_LIMIT`] unknowns the value is also checked against a dense
/// symmetric eigendecomposition.
pub fn lambda2_reference(domain: &Domain) -> Result<(f64, GridFunction)> {
    let grid = domain.grid();
    let n = grid.num_interior();
    if n > REFERENCE_LIMIT {
        return Err(Error::SizeExceeded { size: n, limit: REFERENCE_LIMIT });
    }
    let a = Stencil::new(grid);
    let mut x = vec![1.0; n];
    let mut y = vec![0.0; n];
    let mut ax = vec![0.0; n];
    let mut lambda = f64::INFINITY;
    // eigen-residual target, floored by what rounding in A x allows
    let floor = 64.0 * f64::EPSILON * 2.0 * a.diag;
    let mut converged = false;
    let mut residual = f64::NAN;
    for _ in 0..MAX_POWER_STEPS {
        let norm = dot(&x, &x).sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
        y.copy_from_slice(&x);
        conjugate_gradient(|v, out| a.apply(v, out), &x, &mut y, 1e-14, 20 * n + 100)?;
        let norm = dot(&y, &y).sqrt();
        x.iter_mut().zip(&y).for_each(|(u, v)| *u = v / norm);
        a.apply(&x, &mut ax);
        lambda = dot(&x, &ax);
        residual = ax.iter().zip(&x).map(|(p, u)| (p - lambda * u).powi(2)).sum::<f64>().sqrt();
        if residual <= 1e-12 * lambda + floor {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: MAX_POWER_STEPS,
            residual,
            tolerance: 1e-12 * lambda + floor,
        });
    }

    if n <= DENSE_LIMIT {
        let eig = a.dense().symmetric_eigen();
        let dense_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if (dense_min - lambda).abs() > 1e-10 * lambda {
            return Err(Error::OracleMismatch(format!(
                "inverse power iteration gives {lambda}, dense eigensolve gives {dense_min}"
            )));
        }
    }

    let sign = if x.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let scale = sign / sup_abs(&x);
    let v: Vec<f64> = x.iter().map(|u| u * scale).collect();
    Ok((lambda, GridFunction::from_interior(grid, &v)?))
}

#[inline]
fn phi(x: f64, r: f64) -> f64 {
    // |x|^{r-2} x
    if x == 0.0 {
        0.0
    } else {
        x.abs().powf(r - 1.0).copysign(x)
    }
}

/// The first-order system `u' = |s|^{q-2} s`, `s' = -lambda |u|^{p-2} u`.
struct Shooter {
    p: f64,
    q: f64,
    lambda: f64,
}

impl Shooter {
    fn rhs(&self, [u, s]: [f64; 2]) -> [f64; 2] {
        [phi(s, self.q), -self.lambda * phi(u, self.p)]
    }

    fn rk4(&self, y: [f64; 2], dx: f64) -> [f64; 2] {
        let add = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * b[0], a[1] + t * b[1]];
        let k1 = self.rhs(y);
        let k2 = self.rhs(add(y, k1, dx / 2.0));
        let k3 = self.rhs(add(y, k2, dx / 2.0));
        let k4 = self.rhs(add(y, k3, dx));
        [
            y[0] + dx / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y[1] + dx / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    }

    /// One step-doubling controlled step. Returns the accepted state, the
    /// step taken, and a proposal for the next step.
    fn controlled(&self, y: [f64; 2], mut dx: f64, atol: f64) -> ([f64; 2], f64, f64) {
        loop {
            let full = self.rk4(y, dx);
            let half = self.rk4(self.rk4(y, dx / 2.0), dx / 2.0);
            let err = (full[0] - half[0]).abs().max((full[1] - half[1]).abs()) / 15.0;
            if err <= atol || dx < 1e-14 {
                let grow = if err == 0.0 { 4.0 } else { (0.9 * (atol / err).powf(0.2)).clamp(0.2, 4.0) };
                // local extrapolation
                let y1 = [half[0] + (half[0] - full[0]) / 15.0, half[1] + (half[1] - full[1]) / 15.0];
                return (y1, dx, dx * grow);
            }
            dx *= (0.9 * (atol / err).powf(0.2)).clamp(0.1, 0.5);
        }
    }

    /// Integrates from `x = 0` to `x_end`, stopping early at the first
    /// return of `u` to zero. Calls `visit` at every point of `samples`
    /// (sorted, inside `[0, x_end]`) reached before that.
    fn integrate(&self, x_end: f64, atol: f64, samples: &[f64], mut visit: impl FnMut(f64, [f64; 2])) -> Option<f64> {
        let mut x = 0.0;
        let mut y = [0.0, 1.0];
        let mut dx = 1e-4 * x_end;
        let mut next_sample = 0;
        while next_sample < samples.len() && samples[next_sample] <= 0.0 {
            visit(samples[next_sample], y);
            next_sample += 1;
        }
        while x < x_end {
            let mut target = x_end;
            if next_sample < samples.len() {
                target = target.min(samples[next_sample]);
            }
            let trial = dx.min(target - x);
            let (y1, taken, proposal) = self.controlled(y, trial, atol);
            if x > 0.0 && y1[0] <= 0.0 {
                return Some(self.locate_zero(x, y, taken));
            }
            x = if taken == target - x { target } else { x + taken };
            y = y1;
            // a step shortened to land on a sample says little about the scale
            dx = if taken == trial && trial < dx { dx.max(proposal) } else { proposal };
            while next_sample < samples.len() && samples[next_sample] <= x {
                visit(samples[next_sample], y);
                next_sample += 1;
            }
        }
        None
    }

    /// Bisection on the step length for the crossing `u = 0` inside
    /// `[x, x + dx]`.
    fn locate_zero(&self, x: f64, y: [f64; 2], dx: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, dx);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            // sub-steps keep each RK4 evaluation inside the accuracy budget
            let pieces = 4;
            let mut z = y;
            for _ in 0..pieces {
                z = self.rk4(z, mid / pieces as f64);
            }
            if z[0] > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        x + 0.5 * (lo + hi)
    }
}

/// First Dirichlet eigenvalue of the one-dimensional p-Laplacian on `(0, 1)`
/// by shooting: bisection on `lambda` until the first positive zero of `u`
/// sits at `x = 1`, to relative bracket width `tol`.
pub fn lambda_p_shooting_1d(p: f64, tol: f64) -> Result<f64> {
    if !(p.is_finite() && p > 1.0) {
        return Err(Error::InvalidParameter(format!("p must exceed 1, got {p}")));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let q = p / (p - 1.0);
    let atol = (1e-3 * tol).clamp(1e-14, 1e-9);
    // true if the first zero lies at or before x = 1
    let too_big = |lambda: f64| Shooter { p, q, lambda }.integrate(1.0, atol, &[], |_, _| {}).is_some();

    let (mut lo, mut hi) = (1.0, 1.0);
    let mut tries = 0;
    while too_big(lo) {
        lo *= 0.5;
        tries += 1;
        if tries > 200 {
            return Err(Error::Shooting(format!("no lower bracket for p = {p}")));
        }
    }
    tries = 0;
    while !too_big(hi) {
        hi *= 2.0;
        tries += 1;
        if tries > 200 {
            return Err(Error::Shooting(format!("no upper bracket for p = {p}")));
        }
    }
    while hi - lo > tol * lo {
        let mid = 0.5 * (lo + hi);
        if too_big(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Samples of the shooting solution `u` at `lambda` on `m + 1` equispaced
/// points of `[0, 1]`, as `(x, u)` pairs. Points past the first zero of `u`
/// are omitted.
pub fn shooting_profile(p: f64, lambda: f64, m: usize) -> Result<Vec<[f64; 2]>> {
    if !(p > 1.0 && lambda > 0.0 && m > 0) {
        return Err(Error::InvalidParameter("shooting profile needs p > 1, lambda > 0, m > 0".into()));
    }
    let q = p / (p - 1.0);
    let samples: Vec<f64> = (0..=m).map(|i| i as f64 / m as f64).collect();
    let mut out = Vec::with_capacity(m + 1);
    Shooter { p, q, lambda }.integrate(1.0, 1e-13, &samples, |x, y| out.push([x, y[0]]));
    Ok(out)
}

/// Smallest discrete Rayleigh quotient found by multistart projected
/// gradient descent on the unit `L^p` sphere. The first start is the
/// positive constant; the rest use random magnitudes and signs.
pub fn rayleigh_bruteforce(domain: &Domain, p: f64, restarts: usize, seed: u64) -> Result<f64> {
    if !(p.is_finite() && p > 1.0) {
        return Err(Error::InvalidParameter(format!("p must exceed 1, got {p}")));
    }
    let grid = domain.grid();
    let n = grid.num_interior();
    if n > BRUTEFORCE_LIMIT {
        return Err(Error::SizeExceeded { size: n, limit: BRUTEFORCE_LIMIT });
    }
    let ops = CellOps::new(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<Vec<f64>> = (0..restarts.max(1))
        .map(|r| {
            (0..n)
                .map(|_| {
                    if r == 0 {
                        1.0
                    } else {
                        let m: f64 = rng.gen_range(0.1..1.0);
                        if rng.gen_bool(0.5) {
                            m
                        } else {
                            -m
                        }
                    }
                })
                .collect()
        })
        .collect();
    let best = starts
        .into_par_iter()
        .map(|v| descend(&ops, p, v))
        .reduce(|| f64::INFINITY, f64::min);
    Ok(best)
}

fn quotient(ops: &CellOps, p: f64, v: &[f64], zero: &[f64]) -> f64 {
    let (energy, _) = ops.objective_parts(v, zero, p, 0.0);
    let norm: f64 = v.iter().map(|x| x.abs().powf(p)).sum::<f64>() * ops.volume() / p;
    energy / norm
}

fn normalize(v: &mut [f64], p: f64) {
    let norm = v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p);
    v.iter_mut().for_each(|x| *x /= norm);
}

fn descend(ops: &CellOps, p: f64, mut v: Vec<f64>) -> f64 {
    let n = v.len();
    let zero = vec![0.0; n];
    let mut grad_e = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut g_prev = vec![0.0; n];
    let mut v_prev = vec![0.0; n];
    let mut trial = vec![0.0; n];
    normalize(&mut v, p);
    let mut r = quotient(ops, p, &v, &zero);
    let mut step = 1e-3;
    for it in 0..50_000 {
        ops.gradient(&v, &zero, p, 0.0, &mut grad_e);
        let norm: f64 = v.iter().map(|x| x.abs().powf(p)).sum::<f64>() * ops.volume() / p;
        for i in 0..n {
            g[i] = (grad_e[i] - r * signed_pow(v[i], p) * ops.volume()) / norm;
        }
        if sup_abs(&g) * sup_abs(&v) <= 1e-13 * r {
            break;
        }
        if it > 0 {
            let mut sy = 0.0;
            let mut ss = 0.0;
            for i in 0..n {
                let s = v[i] - v_prev[i];
                sy += s * (g[i] - g_prev[i]);
                ss += s * s;
            }
            if sy > 0.0 {
                step = ss / sy;
            }
        }
        let slope = -dot(&g, &g);
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                trial[i] = v[i] - t * g[i];
            }
            normalize(&mut trial, p);
            let r1 = quotient(ops, p, &trial, &zero);
            if r1.is_finite() && r1 <= r + 1e-4 * t * slope {
                r = r1;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        v_prev.copy_from_slice(&v);
        g_prev.copy_from_slice(&g);
        v.copy_from_slice(&trial);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DomainSpec;
    use std::f64::consts::PI;

    fn domain(spec: DomainSpec, n: usize) -> Domain {
        Domain::new(spec, n).unwrap()
    }

    /// Continuum 1D value from the first integral of the ODE.
    fn closed_form(p: f64) -> f64 {
        (p - 1.0) * (2.0 * PI / (p * (PI / p).sin())).powf(p)
    }

    #[test]
    fn three_node_interval() {
        let (lambda, v) = lambda2_reference(&domain(DomainSpec::unit_interval(), 3)).unwrap();
        assert!((lambda - 16.0 * (2.0 - 2f64.sqrt())).abs() < 1e-12);
        let vals = v.interior_values();
        assert!((vals[1] - 1.0).abs() < 1e-12);
        assert!((vals[0] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((vals[2] - vals[0]).abs() < 1e-12);
    }

    #[test]
    fn matches_tridiagonal_spectrum() {
        for n in [10, 100, 1000] {
            let d = domain(DomainSpec::unit_interval(), n);
            let h = d.grid().spacing();
            let (lambda, _) = lambda2_reference(&d).unwrap();
            let exact = 4.0 / (h * h) * (PI * h / 2.0).sin().powi(2);
            assert!((lambda - exact).abs() < 1e-11 * exact, "n={n}");
        }
    }

    #[test]
    fn square_is_twice_interval() {
        for n in [8, 20, 40] {
            let (sq, _) = lambda2_reference(&domain(DomainSpec::unit_square(), n)).unwrap();
            // the square grid has n - 1 interior nodes per side
            let (line, _) = lambda2_reference(&domain(DomainSpec::unit_interval(), n - 1)).unwrap();
            assert!((sq - 2.0 * line).abs() < 1e-10 * sq);
        }
        let (fine, _) = lambda2_reference(&domain(DomainSpec::unit_square(), 100)).unwrap();
        assert!((fine - 2.0 * PI * PI).abs() < 1e-3 * fine);
    }

    #[test]
    fn second_order_convergence_to_pi_squared() {
        let errs: Vec<f64> = [31, 63, 127]
            .iter()
            .map(|&n| lambda2_reference(&domain(DomainSpec::unit_interval(), n)).unwrap().0 - PI * PI)
            .collect();
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!((rate - 2.0).abs() < 0.05, "rate {rate}");
        }
    }

    #[test]
    fn rejects_oversized() {
        let d = domain(DomainSpec::unit_square(), 200);
        assert!(matches!(lambda2_reference(&d), Err(Error::SizeExceeded { .. })));
    }

    #[test]
    fn shooting_reproduces_continuum_values() {
        assert!((lambda_p_shooting_1d(2.0, 1e-10).unwrap() - PI * PI).abs() < 1e-8 * PI * PI);
        for p in [1.2, 1.5, 3.0, 6.0, 10.0] {
            let v = lambda_p_shooting_1d(p, 1e-10).unwrap();
            let exact = closed_form(p);
            assert!((v - exact).abs() < 1e-7 * exact, "p={p}: {v} vs {exact}");
        }
    }

    #[test]
    fn shooting_profile_is_symmetric() {
        for p in [1.5, 3.0, 6.0] {
            let lambda = lambda_p_shooting_1d(p, 1e-11).unwrap();
            let prof = shooting_profile(p, lambda, 200).unwrap();
            assert!(prof.len() >= 200);
            let top = prof.iter().map(|s| s[1]).fold(0.0, f64::max);
            for i in 0..prof.len().min(200) {
                let j = 200 - i;
                if j < prof.len() {
                    assert!((prof[i][1] - prof[j][1]).abs() <= 1e-6 * top, "p={p} i={i}");
                }
            }
        }
    }

    #[test]
    fn shooting_is_continuous_in_p() {
        for p in [1.2, 2.5, 5.0, 10.0] {
            let a = lambda_p_shooting_1d(p, 1e-10).unwrap();
            let b = lambda_p_shooting_1d(p + 1e-3, 1e-10).unwrap();
            assert!((a - b).abs() <= 1e-2 * a, "p={p}");
        }
    }

    #[test]
    fn bruteforce_agrees_with_dense_at_p2() {
        let d = domain(DomainSpec::unit_interval(), 3);
        let (lambda, _) = lambda2_reference(&d).unwrap();
        let b = rayleigh_bruteforce(&d, 2.0, 64, 0).unwrap();
        assert!((b - lambda).abs() < 1e-8 * lambda);
    }

    #[test]
    fn bruteforce_scales_with_length() {
        let a = rayleigh_bruteforce(&domain(DomainSpec::unit_interval(), 5), 2.0, 16, 0).unwrap();
        let b = rayleigh_bruteforce(&domain(DomainSpec::interval(0.0, 2.0).unwrap(), 5), 2.0, 16, 0).unwrap();
        assert!((a / b - 4.0).abs() < 1e-8);
    }

    #[test]
    fn bruteforce_rejects_large_grids() {
        let d = domain(DomainSpec::unit_interval(), 20);
        assert!(rayleigh_bruteforce(&d, 3.0, 4, 0).is_err());
    }
}
