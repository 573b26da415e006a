//! Periodic P1 assembly and zero-mean solves on a [`SuperMesh`].
//!
//! Coefficients are sampled once per simplex (barycenter quadrature), which is
//! exact for the per-element constant fields produced by [`crate::fields`].
//! Assembly visits simplices in ascending index order, so results are
//! bit-reproducible.

use crate::mesh::SuperMesh;
use crate::small::{SMat, SVec};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("non-finite coefficient on element {element}")]
    NonFiniteCoefficient { element: usize },
    #[error("coefficient not coercive on element {element}: smallest eigenvalue {eigenvalue:e}")]
    NotCoercive { element: usize, eigenvalue: f64 },
    #[error("direction must have unit length, |p| = {norm}")]
    NonUnitDirection { norm: f64 },
    #[error("right-hand side is not orthogonal to constants: sum {sum:e} vs l1 norm {l1:e}")]
    IncompatibleRhs { sum: f64, l1: f64 },
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {relative_residual:e})")]
    NotConverged { iterations: usize, relative_residual: f64 },
    #[error("shape mismatch: expected {expected} entries, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Linear solver settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative residual target ||Kx - b|| <= rtol ||b||.
    pub rtol: f64,
    /// Iteration cap as a multiple of the DOF count.
    pub max_iter_factor: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { rtol: 1e-10, max_iter_factor: 50 }
    }
}

/// CSR sparsity pattern of the periodic P1 stiffness matrix.
#[derive(Debug)]
struct Pattern {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// For every element, the CSR slot of each local (a, b) pair, row-major.
    element_slots: Vec<usize>,
}

/// Zero-mean periodic P1 space on a supercell mesh.
#[derive(Debug)]
pub struct P1Space {
    pub mesh: SuperMesh,
    pattern: Arc<Pattern>,
    /// Integral of each hat function (volume weights for the mean).
    weights: Vec<f64>,
}

impl P1Space {
    pub fn new(mesh: SuperMesh) -> Self {
        let n = mesh.n_dofs;
        let nl = mesh.dim() + 1;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in 0..mesh.n_cells() {
            let dofs = mesh.element_dofs(e);
            for &a in dofs {
                rows[a].extend_from_slice(dofs);
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let mut element_slots = Vec::with_capacity(mesh.n_cells() * nl * nl);
        for e in 0..mesh.n_cells() {
            let dofs = mesh.element_dofs(e);
            for &a in dofs {
                let row = &col_idx[row_ptr[a]..row_ptr[a + 1]];
                for &b in dofs {
                    let pos = row.binary_search(&b).expect("pattern covers element couplings");
                    element_slots.push(row_ptr[a] + pos);
                }
            }
        }
        let mut weights = vec![0.0; n];
        for e in 0..mesh.n_cells() {
            let w = mesh.volume_of(e) / nl as f64;
            for &a in mesh.element_dofs(e) {
                weights[a] += w;
            }
        }
        P1Space { mesh, pattern: Arc::new(Pattern { row_ptr, col_idx, element_slots }), weights }
    }

    pub fn n_dofs(&self) -> usize {
        self.mesh.n_dofs
    }

    pub fn n_elements(&self) -> usize {
        self.mesh.n_cells()
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn volume(&self) -> f64 {
        self.mesh.volume
    }

    /// Volume-weighted mean of a P1 field over Q_N.
    pub fn mean(&self, u: &[f64]) -> f64 {
        let num: f64 = u.iter().zip(&self.weights).map(|(x, w)| x * w).sum();
        num / self.mesh.volume
    }

    /// Assembles K[a][b] = sum_T |T| grad(phi_b) . C_T grad(phi_a).
    pub fn assemble_stiffness(&self, coeff: impl Fn(usize) -> SMat) -> Result<StiffnessMatrix, FemError> {
        let nl = self.dim() + 1;
        let mut values = vec![0.0; self.pattern.col_idx.len()];
        for e in 0..self.n_elements() {
            let c = coeff(e);
            if !c.is_finite() {
                return Err(FemError::NonFiniteCoefficient { element: e });
            }
            let lam = c.min_sym_eigenvalue();
            if lam <= 0.0 {
                return Err(FemError::NotCoercive { element: e, eigenvalue: lam });
            }
            let geo = self.mesh.geometry(e);
            let slots = &self.pattern.element_slots[e * nl * nl..(e + 1) * nl * nl];
            for a in 0..nl {
                let cga = c.transpose().mul_vec(&geo.basis_gradients[a]);
                for b in 0..nl {
                    values[slots[a * nl + b]] += geo.volume * geo.basis_gradients[b].dot(&cga);
                }
            }
        }
        Ok(StiffnessMatrix { pattern: Arc::clone(&self.pattern), values })
    }

    /// Load b[a] = -sum_T |T| f_T . grad(phi_a) for a per-element flux f.
    pub fn assemble_flux_load(&self, flux: impl Fn(usize) -> SVec) -> Result<Vec<f64>, FemError> {
        let mut b = vec![0.0; self.n_dofs()];
        for e in 0..self.n_elements() {
            let f = flux(e);
            if !f.is_finite() {
                return Err(FemError::NonFiniteCoefficient { element: e });
            }
            let geo = self.mesh.geometry(e);
            for (a, &dof) in self.mesh.element_dofs(e).iter().enumerate() {
                b[dof] -= geo.volume * f.dot(&geo.basis_gradients[a]);
            }
        }
        Ok(b)
    }

    /// Load b[a] = -sum_T |T| (C_T p) . grad(phi_a), with |p| = 1.
    pub fn assemble_load(&self, coeff: impl Fn(usize) -> SMat, p: &SVec) -> Result<Vec<f64>, FemError> {
        check_unit(p)?;
        self.assemble_flux_load(|e| coeff(e).mul_vec(p))
    }

    /// Solves K x = b in the zero-mean subspace with Jacobi-preconditioned CG.
    pub fn solve_zero_mean(&self, k: &StiffnessMatrix, b: &[f64], opts: &SolverOptions) -> Result<Solve, FemError> {
        let n = self.n_dofs();
        if b.len() != n {
            return Err(FemError::ShapeMismatch { expected: n, got: b.len() });
        }
        let sum: f64 = b.iter().sum();
        let l1: f64 = b.iter().map(|x| x.abs()).sum();
        let diag = k.diagonal();
        // A load at roundoff level relative to the operator is treated as zero.
        if l1 <= 1e-13 * diag.iter().sum::<f64>() {
            return Ok(Solve { field: DofField { values: vec![0.0; n], mean: 0.0 }, iterations: 0, relative_residual: 0.0 });
        }
        if sum.abs() > 1e-9 * l1.max(f64::MIN_POSITIVE) && l1 > 0.0 {
            return Err(FemError::IncompatibleRhs { sum, l1 });
        }
        let shift = sum / n as f64;
        let rhs: Vec<f64> = b.iter().map(|x| x - shift).collect();
        let b_norm = norm(&rhs);
        if b_norm == 0.0 {
            return Ok(Solve { field: DofField { values: vec![0.0; n], mean: 0.0 }, iterations: 0, relative_residual: 0.0 });
        }

        let max_iter = opts.max_iter_factor * n;
        let mut x = vec![0.0; n];
        let mut r = rhs.clone();
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
        let mut p = z.clone();
        let mut kp = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let mut iterations = 0;
        let mut rel = norm(&r) / b_norm;
        while rel > opts.rtol {
            if iterations >= max_iter {
                return Err(FemError::NotConverged { iterations, relative_residual: rel });
            }
            k.mul_into(&p, &mut kp);
            let alpha = rz / dot(&p, &kp);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * kp[i];
            }
            for i in 0..n {
                z[i] = r[i] / diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            iterations += 1;
            rel = norm(&r) / b_norm;
        }
        let mean = self.mean(&x);
        for xi in x.iter_mut() {
            *xi -= mean;
        }
        let mut kx = vec![0.0; n];
        k.mul_into(&x, &mut kx);
        let true_rel = kx.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / b_norm;
        let mean = self.mean(&x);
        Ok(Solve { field: DofField { values: x, mean }, iterations, relative_residual: true_rel })
    }

    /// Piecewise-constant gradient of the P1 interpolant on each simplex.
    pub fn element_gradients(&self, u: &[f64]) -> Result<Vec<SVec>, FemError> {
        if u.len() != self.n_dofs() {
            return Err(FemError::ShapeMismatch { expected: self.n_dofs(), got: u.len() });
        }
        Ok((0..self.n_elements())
            .map(|e| {
                let geo = self.mesh.geometry(e);
                self.mesh
                    .element_dofs(e)
                    .iter()
                    .zip(&geo.basis_gradients)
                    .fold(SVec::zeros(self.dim()), |acc, (&dof, g)| acc + g.scale(u[dof]))
            })
            .collect())
    }

    /// Gradients of a field given by raw (non-periodic) vertex values.
    /// Single-cell debugging aid: periodic identification is ignored.
    pub fn vertex_field_gradients(&self, vertex_values: &[f64]) -> Result<Vec<SVec>, FemError> {
        if vertex_values.len() != self.mesh.vertices.len() {
            return Err(FemError::ShapeMismatch { expected: self.mesh.vertices.len(), got: vertex_values.len() });
        }
        Ok((0..self.n_elements())
            .map(|e| {
                let geo = self.mesh.geometry(e);
                self.mesh
                    .cell(e)
                    .iter()
                    .zip(&geo.basis_gradients)
                    .fold(SVec::zeros(self.dim()), |acc, (&v, g)| acc + g.scale(vertex_values[v]))
            })
            .collect())
    }

    /// sqrt(sum_T |T| |g_T|^2).
    pub fn grad_l2_norm(&self, g: &[SVec]) -> Result<f64, FemError> {
        if g.len() != self.n_elements() {
            return Err(FemError::ShapeMismatch { expected: self.n_elements(), got: g.len() });
        }
        Ok((0..self.n_elements()).map(|e| self.mesh.volume_of(e) * g[e].norm_sq()).sum::<f64>().sqrt())
    }

    /// Volume integral of a per-element quantity.
    pub fn integrate<T, F>(&self, zero: T, f: F) -> T
    where
        T: std::ops::Add<Output = T> + Copy,
        F: Fn(usize) -> T,
        T: Scale,
    {
        (0..self.n_elements()).fold(zero, |acc, e| acc + f(e).scaled(self.mesh.volume_of(e)))
    }
}

/// Multiplication by a scalar, used by [`P1Space::integrate`].
pub trait Scale {
    fn scaled(self, s: f64) -> Self;
}

impl Scale for f64 {
    fn scaled(self, s: f64) -> f64 {
        self * s
    }
}

impl Scale for SVec {
    fn scaled(self, s: f64) -> SVec {
        self.scale(s)
    }
}

impl Scale for SMat {
    fn scaled(self, s: f64) -> SMat {
        self.scale(s)
    }
}

pub fn check_unit(p: &SVec) -> Result<(), FemError> {
    let norm = p.norm();
    if (norm - 1.0).abs() > 1e-12 {
        return Err(FemError::NonUnitDirection { norm });
    }
    Ok(())
}

/// Assembled sparse stiffness matrix over periodic DOFs.
#[derive(Clone, Debug)]
pub struct StiffnessMatrix {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl StiffnessMatrix {
    pub fn n(&self) -> usize {
        self.pattern.row_ptr.len() - 1
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let p = &self.pattern;
        let row = &p.col_idx[p.row_ptr[i]..p.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(pos) => self.values[p.row_ptr[i] + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for i in 0..self.n() {
            let mut acc = 0.0;
            for s in p.row_ptr[i]..p.row_ptr[i + 1] {
                acc += self.values[s] * x[p.col_idx[s]];
            }
            y[i] = acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n()];
        self.mul_into(x, &mut y);
        y
    }

    /// Row i as (column, value) pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let p = &self.pattern;
        (p.row_ptr[i]..p.row_ptr[i + 1]).map(move |s| (p.col_idx[s], self.values[s]))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| (0..self.n()).map(|j| self.get(i, j)).collect()).collect()
    }
}

/// P1 field over periodic DOFs with its volume-weighted mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DofField {
    pub values: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug)]
pub struct Solve {
    pub field: DofField,
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_unit_mesh, replicate};

    fn space(dim: usize, s: usize, n: i64) -> P1Space {
        P1Space::new(replicate(&build_unit_mesh(dim, s).unwrap(), n).unwrap())
    }

    fn two_phase(sp: &P1Space) -> impl Fn(usize) -> SMat + '_ {
        move |e| {
            let x = sp.mesh.barycenter(e).v[0];
            let y = x - (x + 0.5).floor();
            SMat::scalar(1, if y < 0.0 { 1.0 } else { 4.0 })
        }
    }

    #[test]
    fn identity_stiffness_1d_two_elements() {
        let sp = space(1, 2, 0);
        let k = sp.assemble_stiffness(|_| SMat::identity(1)).unwrap();
        assert_eq!(k.to_dense(), vec![vec![4.0, -4.0], vec![-4.0, 4.0]]);
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_scale_linearly() {
        let sp = space(2, 3, 1);
        let coeff = |e: usize| {
            let x = sp.mesh.barycenter(e);
            SMat::from_rows(&[&[2.0 + x.v[0].sin(), 0.3], &[0.3, 1.5 + x.v[1].cos()]])
        };
        let k = sp.assemble_stiffness(coeff).unwrap();
        let k3 = sp.assemble_stiffness(|e| coeff(e).scale(3.0)).unwrap();
        for i in 0..k.n() {
            let s: f64 = k.row(i).map(|(_, v)| v).sum();
            assert!(s.abs() < 1e-10);
            for (j, v) in k.row(i) {
                assert!((k.get(j, i) - v).abs() <= 1e-12 * v.abs().max(1.0));
                assert!((k3.get(i, j) - 3.0 * v).abs() <= 1e-14 * v.abs());
            }
        }
    }

    #[test]
    fn assembly_rejects_bad_coefficients() {
        let sp = space(2, 2, 0);
        let err = sp.assemble_stiffness(|e| if e == 3 { SMat::scalar(2, f64::NAN) } else { SMat::identity(2) });
        assert_eq!(err.unwrap_err(), FemError::NonFiniteCoefficient { element: 3 });
        let err = sp.assemble_stiffness(|_| SMat::diag(&[1.0, -0.5]));
        assert!(matches!(err.unwrap_err(), FemError::NotCoercive { element: 0, .. }));
    }

    #[test]
    fn load_examples() {
        let sp = space(2, 4, 1);
        let p = SVec::from_slice(&[0.6, 0.8]);
        let b = sp.assemble_load(|_| SMat::scalar(2, 2.5), &p).unwrap();
        assert!(b.iter().all(|x| x.abs() < 1e-12));

        let sp1 = space(1, 2, 0);
        let b = sp1.assemble_load(two_phase(&sp1), &SVec::from_slice(&[1.0])).unwrap();
        assert!((b[0] - b[1] * -1.0).abs() < 1e-15);
        assert!((b[0].abs() - 3.0).abs() < 1e-14);
        let b2 = sp1.assemble_load(|e| two_phase(&sp1)(e).scale(2.0), &SVec::from_slice(&[1.0])).unwrap();
        assert_eq!(b2[0], 2.0 * b[0]);

        let err = sp.assemble_load(|_| SMat::identity(2), &SVec::from_slice(&[1.0, 1.0]));
        assert!(matches!(err.unwrap_err(), FemError::NonUnitDirection { .. }));
    }

    #[test]
    fn zero_rhs_gives_zero_field() {
        let sp = space(2, 3, 0);
        let k = sp.assemble_stiffness(|_| SMat::identity(2)).unwrap();
        let sol = sp.solve_zero_mean(&k, &vec![0.0; sp.n_dofs()], &SolverOptions::default()).unwrap();
        assert!(sol.field.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn harmonic_mean_corrector_1d() {
        // a = 1 on the left half, 4 on the right: a* = 1.6, grad w = a*/a - 1.
        let sp = space(1, 2, 0);
        let k = sp.assemble_stiffness(two_phase(&sp)).unwrap();
        let p = SVec::from_slice(&[1.0]);
        let b = sp.assemble_load(two_phase(&sp), &p).unwrap();
        let sol = sp.solve_zero_mean(&k, &b, &SolverOptions::default()).unwrap();
        let g = sp.element_gradients(&sol.field.values).unwrap();
        let a = two_phase(&sp);
        for (e, ge) in g.iter().enumerate() {
            let expect = 1.6 / a(e).get(0, 0) - 1.0;
            assert!((ge.v[0] - expect).abs() < 1e-10, "{} vs {}", ge.v[0], expect);
        }
        assert!(sol.field.mean.abs() < 1e-12);
    }

    #[test]
    fn solve_is_deterministic_and_galerkin_orthogonal() {
        let sp = space(2, 4, 1);
        let coeff = |e: usize| {
            let x = sp.mesh.barycenter(e);
            SMat::scalar(2, 1.0 + if (x.v[0] + 0.5).floor() as i64 % 2 == 0 { 0.0 } else { 2.0 } + 0.3 * x.v[1].sin())
        };
        let k = sp.assemble_stiffness(coeff).unwrap();
        let b = sp.assemble_load(coeff, &SVec::unit(2, 0)).unwrap();
        let opts = SolverOptions::default();
        let s1 = sp.solve_zero_mean(&k, &b, &opts).unwrap();
        let s2 = sp.solve_zero_mean(&k, &b, &opts).unwrap();
        assert_eq!(s1.field, s2.field);
        assert!(s1.relative_residual <= 1e-10);
        assert!(s1.field.mean.abs() < 1e-10);

        let x = &s1.field.values;
        let kx = k.mul(x);
        let bn = norm(&b);
        for i in 0..sp.n_dofs() {
            // Testing against a basis vector phi_i (unit norm).
            assert!((b[i] - kx[i]).abs() <= 1e-9 * bn);
        }
        let xkx = dot(x, &kx);
        let xb = dot(x, &b);
        assert!((xkx - xb).abs() <= 1e-9 * xb.abs());
    }

    #[test]
    fn incompatible_rhs_and_non_convergence_are_reported() {
        let sp = space(1, 4, 0);
        let k = sp.assemble_stiffness(|_| SMat::identity(1)).unwrap();
        let err = sp.solve_zero_mean(&k, &[1.0, 0.0, 0.0, 0.0], &SolverOptions::default());
        assert!(matches!(err.unwrap_err(), FemError::IncompatibleRhs { .. }));

        let sp = space(2, 8, 1);
        let k = sp.assemble_stiffness(|_| SMat::identity(2)).unwrap();
        let mut b = vec![0.0; sp.n_dofs()];
        b[0] = 1.0;
        b[100] = -1.0;
        let opts = SolverOptions { rtol: 1e-14, max_iter_factor: 0 };
        let err = sp.solve_zero_mean(&k, &b, &SolverOptions { max_iter_factor: 0, ..opts });
        assert!(matches!(err.unwrap_err(), FemError::NotConverged { .. }));
    }

    #[test]
    fn element_gradient_examples() {
        let sp = space(1, 4, 0);
        let g = sp.element_gradients(&vec![2.5; 4]).unwrap();
        assert!(g.iter().all(|x| x.v[0] == 0.0));

        // Hat function at DOF 2 (x = 0): slope +1/h on the left element, -1/h on the right.
        let mut hat = vec![0.0; 4];
        hat[2] = 1.0;
        let g = sp.element_gradients(&hat).unwrap();
        assert_eq!(g.iter().map(|x| x.v[0]).collect::<Vec<_>>(), vec![0.0, 4.0, -4.0, 0.0]);

        // Linear field sampled at the raw vertices of a single cell.
        let sp2 = space(2, 3, 0);
        let q = SVec::from_slice(&[0.7, -1.3]);
        let vals: Vec<f64> = sp2.mesh.vertices.iter().map(|x| x.dot(&q)).collect();
        for ge in sp2.vertex_field_gradients(&vals).unwrap() {
            assert!((ge - q).max_abs() < 1e-12);
        }
    }

    #[test]
    fn grad_l2_norm_examples() {
        let sp = space(2, 2, 2);
        let zero = vec![SVec::zeros(2); sp.n_elements()];
        assert_eq!(sp.grad_l2_norm(&zero).unwrap(), 0.0);
        let unit = vec![SVec::unit(2, 1); sp.n_elements()];
        let n1 = sp.grad_l2_norm(&unit).unwrap();
        assert!((n1 - 5.0).abs() < 1e-12);
        let two: Vec<SVec> = unit.iter().map(|g| g.scale(2.0)).collect();
        assert!((sp.grad_l2_norm(&two).unwrap() - 2.0 * n1).abs() < 1e-12);
        assert!(sp.grad_l2_norm(&zero[1..]).is_err());
    }

    #[test]
    fn aligned_piecewise_constant_1d_is_refinement_exact() {
        let mut values = Vec::new();
        for s in [2, 4, 8, 16] {
            let sp = space(1, s, 1);
            let k = sp.assemble_stiffness(two_phase(&sp)).unwrap();
            let b = sp.assemble_load(two_phase(&sp), &SVec::from_slice(&[1.0])).unwrap();
            let sol = sp.solve_zero_mean(&k, &b, &SolverOptions::default()).unwrap();
            let g = sp.element_gradients(&sol.field.values).unwrap();
            // Gradient at x = -0.2 (left phase) and x = 0.2 (right phase).
            let pick = |x: f64| (0..sp.n_elements()).find(|&e| (sp.mesh.barycenter(e).v[0] - x).abs() < 0.5 / s as f64).unwrap();
            values.push((g[pick(-0.2)].v[0], g[pick(0.2)].v[0]));
        }
        for v in &values {
            assert!((v.0 - values[0].0).abs() < 1e-9 && (v.1 - values[0].1).abs() < 1e-9);
        }
    }
}
