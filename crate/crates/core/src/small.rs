//! Fixed-capacity vectors and matrices for the ambient dimension (d = 1 or 2).
//!
//! Entries beyond `dim` are kept at zero so that componentwise operations can
//! ignore the dimension entirely.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

pub const MAX_DIM: usize = 2;

/// A point or vector in R^d, d <= 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SVec {
    pub dim: usize,
    pub v: [f64; MAX_DIM],
}

impl SVec {
    pub fn zeros(dim: usize) -> Self {
        SVec { dim, v: [0.0; MAX_DIM] }
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        assert!(!xs.is_empty() && xs.len() <= MAX_DIM, "dimension must be 1 or 2");
        let mut v = [0.0; MAX_DIM];
        v[..xs.len()].copy_from_slice(xs);
        SVec { dim: xs.len(), v }
    }

    /// Canonical basis vector e_i.
    pub fn unit(dim: usize, i: usize) -> Self {
        let mut e = SVec::zeros(dim);
        e.v[i] = 1.0;
        e
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v[..self.dim]
    }

    pub fn dot(&self, other: &SVec) -> f64 {
        (0..self.dim).map(|i| self.v[i] * other.v[i]).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn scale(&self, s: f64) -> SVec {
        let mut out = *self;
        for x in out.v.iter_mut() {
            *x *= s;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.as_slice().iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }
}

impl Add for SVec {
    type Output = SVec;
    fn add(self, rhs: SVec) -> SVec {
        let mut out = self;
        for i in 0..MAX_DIM {
            out.v[i] += rhs.v[i];
        }
        out
    }
}

impl Sub for SVec {
    type Output = SVec;
    fn sub(self, rhs: SVec) -> SVec {
        let mut out = self;
        for i in 0..MAX_DIM {
            out.v[i] -= rhs.v[i];
        }
        out
    }
}

impl Neg for SVec {
    type Output = SVec;
    fn neg(self) -> SVec {
        self.scale(-1.0)
    }
}

/// A d x d matrix, d <= 2, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SMat {
    pub dim: usize,
    pub m: [[f64; MAX_DIM]; MAX_DIM],
}

impl SMat {
    pub fn zeros(dim: usize) -> Self {
        SMat { dim, m: [[0.0; MAX_DIM]; MAX_DIM] }
    }

    pub fn identity(dim: usize) -> Self {
        SMat::scalar(dim, 1.0)
    }

    pub fn scalar(dim: usize, s: f64) -> Self {
        let mut a = SMat::zeros(dim);
        for i in 0..dim {
            a.m[i][i] = s;
        }
        a
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut a = SMat::zeros(d.len());
        for (i, x) in d.iter().enumerate() {
            a.m[i][i] = *x;
        }
        a
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let dim = rows.len();
        let mut a = SMat::zeros(dim);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), dim);
            a.m[i][..dim].copy_from_slice(r);
        }
        a
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn transpose(&self) -> SMat {
        let mut t = SMat::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                t.m[i][j] = self.m[j][i];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &SVec) -> SVec {
        let mut y = SVec::zeros(self.dim);
        for i in 0..self.dim {
            y.v[i] = (0..self.dim).map(|j| self.m[i][j] * x.v[j]).sum();
        }
        y
    }

    pub fn scale(&self, s: f64) -> SMat {
        let mut out = *self;
        for row in out.m.iter_mut() {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.m[i][i]).sum()
    }

    pub fn det(&self) -> f64 {
        match self.dim {
            1 => self.m[0][0],
            _ => self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0],
        }
    }

    /// Inverse, or `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<SMat> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let mut inv = SMat::zeros(self.dim);
        match self.dim {
            1 => inv.m[0][0] = 1.0 / det,
            _ => {
                inv.m[0][0] = self.m[1][1] / det;
                inv.m[1][1] = self.m[0][0] / det;
                inv.m[0][1] = -self.m[0][1] / det;
                inv.m[1][0] = -self.m[1][0] / det;
            }
        }
        Some(inv)
    }

    pub fn sym_part(&self) -> SMat {
        (*self + self.transpose()).scale(0.5)
    }

    /// Ordered eigenvalues (ascending) of the symmetric part.
    pub fn sym_eigenvalues(&self) -> [f64; MAX_DIM] {
        let s = self.sym_part();
        match self.dim {
            1 => [s.m[0][0], s.m[0][0]],
            _ => {
                let half_tr = 0.5 * (s.m[0][0] + s.m[1][1]);
                let half_diff = 0.5 * (s.m[0][0] - s.m[1][1]);
                let r = half_diff.hypot(s.m[0][1]);
                [half_tr - r, half_tr + r]
            }
        }
    }

    pub fn min_sym_eigenvalue(&self) -> f64 {
        self.sym_eigenvalues()[0]
    }

    pub fn max_sym_eigenvalue(&self) -> f64 {
        self.sym_eigenvalues()[self.dim - 1]
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        let mut out = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                out = out.max(self.m[i][j].abs());
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s += self.m[i][j] * self.m[i][j];
            }
        }
        s.sqrt()
    }

    /// Operator 2-norm (largest singular value).
    pub fn op_norm(&self) -> f64 {
        let ata = self.transpose() * *self;
        ata.max_sym_eigenvalue().max(0.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        (0..self.dim).all(|i| (0..self.dim).all(|j| self.m[i][j].is_finite()))
    }

    /// Row-major entries, d*d values.
    pub fn entries(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim * self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.push(self.m[i][j]);
            }
        }
        out
    }

    /// Componentwise map over the active d x d block.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SMat {
        let mut out = SMat::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = f(self.m[i][j]);
            }
        }
        out
    }

    /// Componentwise combination over the active d x d block.
    pub fn zip_with(&self, other: &SMat, f: impl Fn(f64, f64) -> f64) -> SMat {
        let mut out = SMat::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.m[i][j] = f(self.m[i][j], other.m[i][j]);
            }
        }
        out
    }
}

impl Add for SMat {
    type Output = SMat;
    fn add(self, rhs: SMat) -> SMat {
        self.zip_with(&rhs, |a, b| a + b)
    }
}

impl Sub for SMat {
    type Output = SMat;
    fn sub(self, rhs: SMat) -> SMat {
        self.zip_with(&rhs, |a, b| a - b)
    }
}

impl Mul for SMat {
    type Output = SMat;
    fn mul(self, rhs: SMat) -> SMat {
        let d = self.dim;
        let mut out = SMat::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out.m[i][j] = (0..d).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        let a = SMat::from_rows(&[&[2.0, 1.0], &[0.5, 3.0]]);
        let prod = a * a.inverse().unwrap();
        assert!((prod - SMat::identity(2)).max_abs() < 1e-15);
        assert!(SMat::zeros(2).inverse().is_none());
    }

    #[test]
    fn eigenvalues_of_symmetric_2x2() {
        let a = SMat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let ev = a.sym_eigenvalues();
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
        let one = SMat::scalar(1, 4.0);
        assert_eq!(one.min_sym_eigenvalue(), 4.0);
        assert_eq!(one.max_sym_eigenvalue(), 4.0);
    }

    #[test]
    fn op_norm_of_rotation_is_one() {
        let (s, c) = 0.3f64.sin_cos();
        let r = SMat::from_rows(&[&[c, -s], &[s, c]]);
        assert!((r.op_norm() - 1.0).abs() < 1e-14);
    }
}
