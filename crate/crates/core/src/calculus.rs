//! Grid functions and the discrete integrals built on them.
//!
//! The discrete gradient lives on cells. In 1D a cell is `[x_i, x_{i+1}]` with
//! gradient `(u_{i+1} - u_i)/h`. In 2D the cell with lower-left node `(i, j)`
//! carries the pair of forward differences along its lower and left edges,
//! so every lattice edge is used by exactly one cell and the quadratic energy
//! reproduces the 5-point Laplacian. All integrals use the rectangle rule
//! with weight `h^dim`.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::linalg::BandedSym;

/// Real values on the lattice nodes, zero on every non-interior node.
#[derive(Debug, Clone)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl PartialEq for GridFunction {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) && self.values == other.values
    }
}

impl GridFunction {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![0.0; grid.num_nodes()],
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::InvalidParameter(format!(
                "expected {} node values, got {}",
                grid.num_nodes(),
                values.len()
            )));
        }
        for (node, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { node });
            }
        }
        for &node in grid.boundary() {
            if values[node] != 0.0 {
                return Err(Error::BoundaryViolation {
                    node,
                    value: values[node],
                });
            }
        }
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// Builds a function from values on the interior nodes, in
    /// [`Grid::interior`] order.
    pub fn from_interior(grid: &Arc<Grid>, interior: &[f64]) -> Result<Self> {
        if interior.len() != grid.num_interior() {
            return Err(Error::InvalidParameter(format!(
                "expected {} interior values, got {}",
                grid.num_interior(),
                interior.len()
            )));
        }
        let mut values = vec![0.0; grid.num_nodes()];
        for (&node, &v) in grid.interior().iter().zip(interior) {
            if !v.is_finite() {
                return Err(Error::NonFinite { node });
            }
            values[node] = v;
        }
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// Samples `f` at interior nodes; boundary nodes get 0.
    pub fn from_fn(grid: &Arc<Grid>, mut f: impl FnMut([f64; 2]) -> f64) -> Result<Self> {
        let interior: Vec<f64> = grid.interior().iter().map(|&n| f(grid.coords(n))).collect();
        Self::from_interior(grid, &interior)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn interior_values(&self) -> Vec<f64> {
        self.grid.interior().iter().map(|&n| self.values[n]).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Writes `x[,y],value` rows for every node, 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.grid.dim() == 1 {
            w.write_record(["x", "value"])?;
        } else {
            w.write_record(["x", "y", "value"])?;
        }
        for (node, v) in self.values.iter().enumerate() {
            let [x, y] = self.grid.coords(node);
            if self.grid.dim() == 1 {
                w.write_record([fmt_f64(x), fmt_f64(*v)])?;
            } else {
                w.write_record([fmt_f64(x), fmt_f64(y), fmt_f64(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`GridFunction::write_csv`]. Rows are
    /// matched to lattice nodes by coordinates; every interior node must be
    /// present and boundary rows must be zero.
    pub fn read_csv<R: Read>(grid: &Arc<Grid>, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let dim = grid.dim();
        let expected = if dim == 1 { 2 } else { 3 };
        let headers = rdr.headers()?.clone();
        if headers.len() != expected {
            return Err(Error::Parse(format!(
                "expected {expected} columns for a {dim}D grid, got {}",
                headers.len()
            )));
        }
        let (nx, ny) = grid.node_counts();
        let h = grid.spacing();
        let origin = grid.coords(0);
        let mut values = vec![0.0; grid.num_nodes()];
        let mut seen = vec![false; grid.num_nodes()];
        for record in rdr.records() {
            let record = record?;
            let nums: Vec<f64> = record
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad number `{s}`: {e}")))
                })
                .collect::<Result<_>>()?;
            let locate = |coord: f64, o: f64, count: usize| -> Result<usize> {
                let t = (coord - o) / h;
                let idx = t.round();
                if (t - idx).abs() > 1e-6 || idx < 0.0 || idx as usize >= count {
                    return Err(Error::Parse(format!("coordinate {coord} is not a lattice node")));
                }
                Ok(idx as usize)
            };
            let i = locate(nums[0], origin[0], nx)?;
            let j = if dim == 1 { 0 } else { locate(nums[1], origin[1], ny)? };
            let node = grid.node_index(i, j);
            values[node] = nums[expected - 1];
            seen[node] = true;
        }
        if let Some(&missing) = grid.interior().iter().find(|&&n| !seen[n]) {
            return Err(Error::Parse(format!("interior node {missing} missing from CSV")));
        }
        Self::from_values(grid, values)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Discrete counterparts of the integrals that appear in the Rayleigh quotient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dirichlet_p: f64,
    pub norm_p: f64,
    pub sup_norm: f64,
    pub grad_sup: f64,
}

fn cell_gradient(grid: &Grid, values: &[f64], cell: crate::geometry::Cell) -> [f64; 2] {
    let h = grid.spacing();
    let base = values[cell.base];
    let gx = (values[cell.east] - base) / h;
    let gy = cell.north.map_or(0.0, |n| (values[n] - base) / h);
    [gx, gy]
}

/// Per-cell gradient vectors, in cell order. The second component is 0 in 1D.
pub fn gradient_field(u: &GridFunction) -> Vec<[f64; 2]> {
    let grid = u.grid();
    grid.cells().map(|c| cell_gradient(grid, &u.values, c)).collect()
}

fn cell_gradient_norms(u: &GridFunction) -> impl Iterator<Item = f64> + Clone + '_ {
    let grid = u.grid();
    grid.cells().map(move |c| {
        let [gx, gy] = cell_gradient(grid, &u.values, c);
        gx.hypot(gy)
    })
}

/// `ln sum_i a_i^p` for nonnegative `a_i`, factoring out the maximum so that
/// large `p` cannot overflow. Returns `-inf` for an all-zero sequence.
fn log_sum_pow(values: impl Iterator<Item = f64> + Clone, p: f64) -> f64 {
    let max = values.clone().fold(0.0, f64::max);
    if max == 0.0 {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.map(|a| (a / max).powf(p)).sum();
    p * max.ln() + sum.ln()
}

fn scaled_sum_pow(values: impl Iterator<Item = f64> + Clone, p: f64) -> f64 {
    let max = values.clone().fold(0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    let sum: f64 = values.map(|a| (a / max).powf(p)).sum();
    max.powf(p) * sum
}

/// `sum_cells |grad u|^p h^dim`.
pub fn p_dirichlet_energy(u: &GridFunction, p: f64) -> f64 {
    scaled_sum_pow(cell_gradient_norms(u), p) * u.grid().cell_volume()
}

/// `sum_interior |u_i|^p h^dim`.
pub fn p_norm_pow(u: &GridFunction, p: f64) -> f64 {
    let grid = u.grid();
    scaled_sum_pow(grid.interior().iter().map(|&n| u.values[n].abs()), p) * grid.cell_volume()
}

/// Natural log of [`p_dirichlet_energy`], finite even when the energy itself
/// is not representable.
pub fn log_p_dirichlet_energy(u: &GridFunction, p: f64) -> f64 {
    log_sum_pow(cell_gradient_norms(u), p) + u.grid().cell_volume().ln()
}

/// Natural log of [`p_norm_pow`].
pub fn log_p_norm_pow(u: &GridFunction, p: f64) -> f64 {
    let grid = u.grid();
    log_sum_pow(grid.interior().iter().map(|&n| u.values[n].abs()), p) + grid.cell_volume().ln()
}

/// Discrete Rayleigh quotient, evaluated in log space.
pub fn rayleigh_quotient(u: &GridFunction, p: f64) -> Result<f64> {
    let log_norm = log_p_norm_pow(u, p);
    if log_norm == f64::NEG_INFINITY {
        return Err(Error::Degenerate);
    }
    Ok((log_p_dirichlet_energy(u, p) - log_norm).exp())
}

pub fn sup_norm(u: &GridFunction) -> f64 {
    u.values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn grad_sup(u: &GridFunction) -> f64 {
    cell_gradient_norms(u).fold(0.0, f64::max)
}

pub fn energy_report(u: &GridFunction, p: f64) -> EnergyReport {
    EnergyReport {
        dirichlet_p: p_dirichlet_energy(u, p),
        norm_p: p_norm_pow(u, p),
        sup_norm: sup_norm(u),
        grad_sup: grad_sup(u),
    }
}

fn check_same_grid(a: &GridFunction, b: &GridFunction) -> Result<()> {
    if a.values.len() == b.values.len() {
        Ok(())
    } else {
        Err(Error::InvalidParameter("grid functions live on different grids".into()))
    }
}

/// `J_eps(v) = sum_cells (1/p)(|grad v|^2 + eps^2)^{p/2} h^dim - sum_interior f_i v_i h^dim`.
pub fn functional_value(v: &GridFunction, f: &GridFunction, p: f64, eps: f64) -> Result<f64> {
    check_same_grid(v, f)?;
    let grid = v.grid();
    let ops = CellOps::new(grid);
    let vi = v.interior_values();
    let fi = f.interior_values();
    let (energy, forcing) = ops.objective_parts(&vi, &fi, p, eps);
    let idle = (grid.num_cells() - ops.num_active_cells()) as f64;
    let idle_energy = if eps > 0.0 {
        idle * eps.powf(p) / p * grid.cell_volume()
    } else {
        0.0
    };
    Ok(energy + idle_energy - forcing)
}

/// Exact gradient of `J_eps` with respect to the interior node values;
/// boundary entries are 0.
pub fn functional_gradient(v: &GridFunction, f: &GridFunction, p: f64, eps: f64) -> Result<GridFunction> {
    check_same_grid(v, f)?;
    let grid = v.grid();
    let ops = CellOps::new(grid);
    let mut g = vec![0.0; grid.num_interior()];
    ops.gradient(&v.interior_values(), &f.interior_values(), p, eps, &mut g);
    GridFunction::from_interior(grid, &g)
}

const NONE: usize = usize::MAX;

/// Cell-to-unknown incidence for the cells that touch an interior node,
/// used by the solvers on plain interior vectors.
#[derive(Debug, Clone)]
pub(crate) struct CellOps {
    /// Interior slots of (base, east, north); `NONE` for pinned nodes.
    cells: Vec<[usize; 3]>,
    two_d: bool,
    inv_h: f64,
    vol: f64,
    n: usize,
    bandwidth: usize,
}

impl CellOps {
    pub(crate) fn new(grid: &Grid) -> Self {
        let slot = |node: usize| grid.interior_slot(node).unwrap_or(NONE);
        let mut cells = Vec::new();
        let mut bandwidth = 0;
        for c in grid.cells() {
            let s = [slot(c.base), slot(c.east), c.north.map_or(NONE, slot)];
            if s.iter().all(|&x| x == NONE) {
                continue;
            }
            for a in s.iter().filter(|&&x| x != NONE) {
                for b in s.iter().filter(|&&x| x != NONE) {
                    bandwidth = bandwidth.max(a.abs_diff(*b));
                }
            }
            cells.push(s);
        }
        Self {
            cells,
            two_d: grid.dim() == 2,
            inv_h: 1.0 / grid.spacing(),
            vol: grid.cell_volume(),
            n: grid.num_interior(),
            bandwidth,
        }
    }

    pub(crate) fn num_unknowns(&self) -> usize {
        self.n
    }

    pub(crate) fn num_active_cells(&self) -> usize {
        self.cells.len()
    }

    pub(crate) fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub(crate) fn volume(&self) -> f64 {
        self.vol
    }

    #[inline]
    fn at(v: &[f64], s: usize) -> f64 {
        if s == NONE {
            0.0
        } else {
            v[s]
        }
    }

    #[inline]
    fn grad(&self, v: &[f64], c: &[usize; 3]) -> [f64; 2] {
        let base = Self::at(v, c[0]);
        let gx = (Self::at(v, c[1]) - base) * self.inv_h;
        let gy = if self.two_d {
            (Self::at(v, c[2]) - base) * self.inv_h
        } else {
            0.0
        };
        [gx, gy]
    }

    /// Returns `(energy, forcing)` with `J = energy - forcing`.
    pub(crate) fn objective_parts(&self, v: &[f64], f: &[f64], p: f64, eps: f64) -> (f64, f64) {
        let eps2 = eps * eps;
        let mut energy = 0.0;
        for c in &self.cells {
            let [gx, gy] = self.grad(v, c);
            let s = gx * gx + gy * gy + eps2;
            energy += s.powf(0.5 * p);
        }
        let forcing: f64 = f.iter().zip(v).map(|(a, b)| a * b).sum();
        (energy * self.vol / p, forcing * self.vol)
    }

    pub(crate) fn gradient(&self, v: &[f64], f: &[f64], p: f64, eps: f64, out: &mut [f64]) {
        let eps2 = eps * eps;
        let scale = self.vol * self.inv_h;
        for (o, fi) in out.iter_mut().zip(f) {
            *o = -fi * self.vol;
        }
        for c in &self.cells {
            let [gx, gy] = self.grad(v, c);
            let s = gx * gx + gy * gy + eps2;
            let w = if s > 0.0 { s.powf(0.5 * p - 1.0) } else { 0.0 };
            let (fx, fy) = (w * gx * scale, w * gy * scale);
            if c[0] != NONE {
                out[c[0]] -= fx + fy;
            }
            if c[1] != NONE {
                out[c[1]] += fx;
            }
            if c[2] != NONE {
                out[c[2]] += fy;
            }
        }
    }

    /// Assembles the Hessian of `J_eps` into `h` (which must have at least
    /// [`CellOps::bandwidth`] bands).
    pub(crate) fn hessian(&self, v: &[f64], p: f64, eps: f64, h: &mut BandedSym) {
        h.clear();
        let eps2 = eps * eps;
        let scale = self.vol * self.inv_h * self.inv_h;
        // columns of the map from (base, east, north) to (gx, gy), times h
        const COLS: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
        for c in &self.cells {
            let [gx, gy] = self.grad(v, c);
            let mut s = gx * gx + gy * gy + eps2;
            if s == 0.0 {
                if p >= 2.0 {
                    // the p = 2 weight is 1 at zero gradient; larger p vanish
                    if p == 2.0 {
                        s = 1.0;
                    } else {
                        continue;
                    }
                } else {
                    s = f64::MIN_POSITIVE.sqrt();
                }
            }
            let w = s.powf(0.5 * p - 1.0);
            let c2 = (p - 2.0) * w / s;
            let m = [
                [w + c2 * gx * gx, c2 * gx * gy],
                [c2 * gx * gy, w + c2 * gy * gy],
            ];
            let nodes = if self.two_d { 3 } else { 2 };
            for a in 0..nodes {
                let sa = c[a];
                if sa == NONE {
                    continue;
                }
                let ca = COLS[a];
                for b in 0..=a {
                    let sb = c[b];
                    if sb == NONE {
                        continue;
                    }
                    let cb = COLS[b];
                    let val = if self.two_d {
                        ca[0] * (m[0][0] * cb[0] + m[0][1] * cb[1]) + ca[1] * (m[1][0] * cb[0] + m[1][1] * cb[1])
                    } else {
                        ca[0] * m[0][0] * cb[0]
                    };
                    let val = val * scale;
                    if sa == sb {
                        h.add(sa, sa, val);
                    } else {
                        h.add(sa, sb, val);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, DomainSpec};
    use proptest::prelude::*;

    fn grid(spec: DomainSpec, n: usize) -> Arc<Grid> {
        Arc::new(build_grid(&spec, n).unwrap())
    }

    fn hat(g: &Arc<Grid>) -> GridFunction {
        GridFunction::from_fn(g, |[x, _]| 1.0 - (2.0 * x - 1.0).abs()).unwrap()
    }

    #[test]
    fn hat_gradient_and_energies() {
        let g = grid(DomainSpec::unit_interval(), 7);
        let u = hat(&g);
        let field = gradient_field(&u);
        assert_eq!(field.len(), 8);
        for (i, [gx, gy]) in field.iter().enumerate() {
            let expected = if i < 4 { 2.0 } else { -2.0 };
            assert!((gx - expected).abs() < 1e-12);
            assert_eq!(*gy, 0.0);
        }
        assert!((p_dirichlet_energy(&u, 2.0) - 4.0).abs() < 1e-12);
        assert!((p_dirichlet_energy(&u, 3.0) - 8.0).abs() < 1e-12);
        assert_eq!(sup_norm(&u), 1.0);
        assert!((grad_sup(&u) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_function() {
        let g = grid(DomainSpec::unit_square(), 5);
        let u = GridFunction::zeros(&g);
        assert!(gradient_field(&u).iter().all(|v| *v == [0.0, 0.0]));
        assert_eq!(p_dirichlet_energy(&u, 2.5), 0.0);
        assert_eq!(p_norm_pow(&u, 2.5), 0.0);
        assert_eq!((sup_norm(&u), grad_sup(&u)), (0.0, 0.0));
        assert!(matches!(rayleigh_quotient(&u, 2.0), Err(Error::Degenerate)));
    }

    #[test]
    fn one_node_bump_touches_three_cells() {
        let g = grid(DomainSpec::unit_square(), 4);
        let h = g.spacing();
        let node = g.node_index(2, 2);
        let mut values = vec![0.0; g.num_nodes()];
        values[node] = 0.75;
        let u = GridFunction::from_values(&g, values).unwrap();
        let mags: Vec<f64> = gradient_field(&u)
            .iter()
            .map(|[x, y]| x.hypot(*y))
            .filter(|m| *m > 0.0)
            .collect();
        assert_eq!(mags.len(), 3);
        let mut sorted = mags.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[0] - 0.75 / h).abs() < 1e-12);
        assert!((sorted[1] - 0.75 / h).abs() < 1e-12);
        assert!((sorted[2] - 0.75 * 2f64.sqrt() / h).abs() < 1e-12);
    }

    #[test]
    fn constant_norm_rectangle_rule() {
        for n in [3, 10, 41] {
            let g = grid(DomainSpec::unit_interval(), n);
            let u = GridFunction::from_fn(&g, |_| 1.0).unwrap();
            let h = g.spacing();
            assert!((p_norm_pow(&u, 2.0) - n as f64 * h).abs() < 1e-12);
            assert!((p_norm_pow(&u, 2.0) - (1.0 - h)).abs() < 1e-12);
        }
    }

    #[test]
    fn hat_norm_converges_second_order() {
        // integral of hat^2 over (0,1) is 1/3
        let mut errs = Vec::new();
        for n in [15, 31, 63, 127] {
            let g = grid(DomainSpec::unit_interval(), n);
            errs.push((p_norm_pow(&hat(&g), 2.0) - 1.0 / 3.0).abs());
        }
        for w in errs.windows(2) {
            let rate = (w[0] / w[1]).log2();
            assert!(rate > 1.9, "observed rate {rate}");
        }
        // and the quotient tends to 4 / (1/3)
        let g = grid(DomainSpec::unit_interval(), 1023);
        let r = rayleigh_quotient(&hat(&g), 2.0).unwrap();
        assert!((r - 12.0).abs() < 1e-4 * 12.0);
    }

    #[test]
    fn p2_gradient_is_stencil() {
        for spec in [DomainSpec::unit_interval(), DomainSpec::rectangle(0.0, 1.5, 0.0, 1.0).unwrap()] {
            let g = grid(spec, 6);
            let v = GridFunction::from_fn(&g, |[x, y]| (3.0 * x).sin() + x * y * y).unwrap();
            let f = GridFunction::from_fn(&g, |[x, y]| 1.0 + x - y).unwrap();
            let grad = functional_gradient(&v, &f, 2.0, 0.0).unwrap();
            let h = g.spacing();
            let vol = g.cell_volume();
            let (nx, _) = g.node_counts();
            for &node in g.interior() {
                let nbrs: Vec<usize> = if g.dim() == 1 {
                    vec![node - 1, node + 1]
                } else {
                    vec![node - 1, node + 1, node - nx, node + nx]
                };
                let lap: f64 = nbrs.iter().map(|&m| v.value(node) - v.value(m)).sum::<f64>() / (h * h);
                let expected = (lap - f.value(node)) * vol;
                assert!((grad.value(node) - expected).abs() < 1e-10 * expected.abs().max(1.0));
            }
        }
    }

    fn pseudo_random(g: &Arc<Grid>, seed: u64) -> GridFunction {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        GridFunction::from_fn(g, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2000) as f64 / 1000.0 - 1.0
        })
        .unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        for (spec, n) in [(DomainSpec::unit_interval(), 9), (DomainSpec::unit_square(), 5)] {
            let g = grid(spec, n);
            for &(p, eps) in &[(1.5, 0.05), (2.0, 0.0), (3.0, 0.0), (6.0, 0.0), (1.2, 0.2)] {
                let v = pseudo_random(&g, 3);
                let f = pseudo_random(&g, 11);
                let d = pseudo_random(&g, 29);
                let grad = functional_gradient(&v, &f, p, eps).unwrap();
                let step = 1e-6;
                let jp = functional_value(&v.clone_with(&d, step), &f, p, eps).unwrap();
                let jm = functional_value(&v.clone_with(&d, -step), &f, p, eps).unwrap();
                let fd = (jp - jm) / (2.0 * step);
                let analytic: f64 = grad.values().iter().zip(d.values()).map(|(a, b)| a * b).sum();
                assert!(
                    (fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-8),
                    "p={p}: fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn hessian_matches_gradient_differences() {
        let g = grid(DomainSpec::unit_square(), 5);
        let ops = CellOps::new(&g);
        for &(p, eps) in &[(1.5, 0.1), (2.0, 0.0), (4.0, 0.0)] {
            let v = pseudo_random(&g, 5).interior_values();
            let f = vec![0.0; ops.num_unknowns()];
            let d = pseudo_random(&g, 7).interior_values();
            let mut hmat = BandedSym::zeros(ops.num_unknowns(), ops.bandwidth());
            ops.hessian(&v, p, eps, &mut hmat);
            let mut hd = vec![0.0; d.len()];
            hmat.mul_vec(&d, &mut hd);
            let step = 1e-6;
            let shift = |t: f64| -> Vec<f64> { v.iter().zip(&d).map(|(a, b)| a + t * b).collect() };
            let (mut gp, mut gm) = (vec![0.0; d.len()], vec![0.0; d.len()]);
            ops.gradient(&shift(step), &f, p, eps, &mut gp);
            ops.gradient(&shift(-step), &f, p, eps, &mut gm);
            for i in 0..d.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * step);
                assert!((fd - hd[i]).abs() <= 1e-5 * hd[i].abs().max(1e-3), "p={p} i={i}");
            }
        }
    }

    impl GridFunction {
        fn clone_with(&self, d: &GridFunction, t: f64) -> GridFunction {
            let values = self.values.iter().zip(&d.values).map(|(a, b)| a + t * b).collect();
            GridFunction::from_values(&self.grid, values).unwrap()
        }
    }

    #[test]
    fn rejects_boundary_values() {
        let g = grid(DomainSpec::unit_interval(), 3);
        assert!(matches!(
            GridFunction::from_values(&g, vec![1.0, 0.0, 0.0, 0.0, 0.0]),
            Err(Error::BoundaryViolation { node: 0, .. })
        ));
        assert!(matches!(
            GridFunction::from_values(&g, vec![0.0, f64::NAN, 0.0, 0.0, 0.0]),
            Err(Error::NonFinite { node: 1 })
        ));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let g = grid(DomainSpec::unit_square(), 6);
        let u = pseudo_random(&g, 17).scaled(std::f64::consts::PI);
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,y,value\n"));
        let back = GridFunction::read_csv(&g, buf.as_slice()).unwrap();
        assert_eq!(back.values(), u.values());
    }

    #[test]
    fn large_p_energy_stays_finite_in_log_space() {
        let g = grid(DomainSpec::unit_interval(), 15);
        let u = hat(&g).scaled(1e3);
        let log_e = log_p_dirichlet_energy(&u, 200.0);
        assert!((log_e - 200.0 * 2000f64.ln()).abs() < 1e-9 * log_e);
        let r = rayleigh_quotient(&u, 200.0).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }

    proptest! {
        #[test]
        fn energy_is_p_homogeneous(seed in 0u64..1000, c in -50.0f64..50.0, p in 1.1f64..8.0) {
            prop_assume!(c.abs() > 1e-3);
            let g = grid(DomainSpec::unit_square(), 5);
            let u = pseudo_random(&g, seed);
            let e = p_dirichlet_energy(&u, p);
            let ec = p_dirichlet_energy(&u.scaled(c), p);
            prop_assert!((ec - c.abs().powf(p) * e).abs() <= 1e-12 * ec.abs().max(1e-300));
            let r = rayleigh_quotient(&u, p).unwrap();
            let rc = rayleigh_quotient(&u.scaled(c), p).unwrap();
            prop_assert!((r - rc).abs() <= 1e-12 * r);
            prop_assert!((sup_norm(&u.scaled(c)) - c.abs() * sup_norm(&u)).abs() <= 1e-12 * c.abs());
            prop_assert!((grad_sup(&u.scaled(c)) - c.abs() * grad_sup(&u)).abs() <= 1e-12 * c.abs() * grad_sup(&u));
        }

        #[test]
        fn functional_is_convex(seed in 0u64..1000, t in 0.01f64..0.99, p in 1.1f64..6.0) {
            let g = grid(DomainSpec::unit_interval(), 12);
            let eps = if p < 2.0 { 0.01 } else { 0.0 };
            let v = pseudo_random(&g, seed);
            let w = pseudo_random(&g, seed + 7919).scaled(3.0);
            let f = pseudo_random(&g, seed + 104729);
            let mix = GridFunction::from_values(
                &g,
                v.values().iter().zip(w.values()).map(|(a, b)| t * a + (1.0 - t) * b).collect(),
            ).unwrap();
            let lhs = functional_value(&mix, &f, p, eps).unwrap();
            let rhs = t * functional_value(&v, &f, p, eps).unwrap()
                + (1.0 - t) * functional_value(&w, &f, p, eps).unwrap();
            prop_assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
        }
    }
}
