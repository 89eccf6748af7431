//! Small linear-algebra kernels: banded SPD Cholesky and conjugate gradients.

use crate::error::{Error, Result};

/// Symmetric matrix stored as its lower band. Entry `(i, j)` with
/// `j <= i <= j + bandwidth` lives at `data[i * (bandwidth + 1) + (i - j)]`.
#[derive(Debug, Clone)]
pub struct BandedSym {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bandwidth);
        i * (self.bandwidth + 1) + (i - j)
    }

    /// Adds `v` to the symmetric pair `(i, j)`, `(j, i)`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(r, c);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.bandwidth {
            0.0
        } else {
            self.data[self.idx(r, c)]
        }
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.data[i * (self.bandwidth + 1)]
    }

    pub fn add_diagonal(&mut self, shift: f64) {
        for i in 0..self.n {
            let k = i * (self.bandwidth + 1);
            self.data[k] += shift;
        }
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bandwidth);
            y[i] += self.diagonal(i) * x[i];
            for j in lo..i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
        }
    }

    /// In-place Cholesky factorization `A = L L^T`.
    pub fn cholesky(mut self) -> Result<BandedCholesky> {
        let bw = self.bandwidth;
        let w = bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut sum = self.data[i * w + (i - j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    sum -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                if j == i {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return Err(Error::LinearSolve(format!(
                            "matrix is not positive definite at pivot {i} ({sum:e})"
                        )));
                    }
                    self.data[i * w] = sum.sqrt();
                } else {
                    self.data[i * w + (i - j)] = sum / self.data[j * w];
                }
            }
        }
        Ok(BandedCholesky { factor: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    factor: BandedSym,
}

impl BandedCholesky {
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let l = &self.factor;
        let (n, bw) = (l.n, l.bandwidth);
        let w = bw + 1;
        for i in 0..n {
            let mut sum = x[i];
            for k in i.saturating_sub(bw)..i {
                sum -= l.data[i * w + (i - k)] * x[k];
            }
            x[i] = sum / l.data[i * w];
        }
        for i in (0..n).rev() {
            let mut sum = x[i];
            for k in i + 1..n.min(i + w) {
                sum -= l.data[k * w + (k - i)] * x[k];
            }
            x[i] = sum / l.data[i * w];
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sup_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Conjugate gradients for an SPD operator given as a closure. Stops when
/// `||r|| <= rel_tol * ||b||`. Returns the number of iterations used.
pub fn conjugate_gradient<A>(apply: A, b: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> Result<usize>
where
    A: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    apply(x, &mut ap);
    for i in 0..n {
        r[i] = b[i] - ap[i];
    }
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(0);
    }
    let target = rel_tol * bnorm;
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..max_iter {
        if rr.sqrt() <= target {
            return Ok(it);
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolve("operator is not positive definite".into()));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() <= target {
        Ok(max_iter)
    } else {
        Err(Error::LinearSolve(format!(
            "conjugate gradients stalled at relative residual {:e}",
            rr.sqrt() / bnorm
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> BandedSym {
        let mut a = BandedSym::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        a
    }

    #[test]
    fn cholesky_solves_banded_system() {
        let n = 40;
        let bw = 5;
        let mut a = BandedSym::zeros(n, bw);
        for i in 0..n {
            a.add(i, i, 12.0 + i as f64 * 0.1);
            for k in 1..=bw.min(i) {
                a.add(i, i - k, -1.0 / (k as f64 + 0.5));
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&x_true, &mut b);
        let mut x = b.clone();
        a.clone().cholesky().unwrap().solve_in_place(&mut x);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = tridiag(4);
        a.add_diagonal(-3.0);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn cg_matches_direct() {
        let a = tridiag(50);
        let b: Vec<f64> = (0..50).map(|i| 1.0 + (i % 3) as f64).collect();
        let mut x_direct = b.clone();
        a.clone().cholesky().unwrap().solve_in_place(&mut x_direct);
        let mut x = vec![0.0; 50];
        conjugate_gradient(|v, out| a.mul_vec(v, out), &b, &mut x, 1e-14, 500).unwrap();
        for (u, v) in x.iter().zip(&x_direct) {
            assert!((u - v).abs() < 1e-9 * v.abs().max(1.0));
        }
    }
}
