//! Model 1: additive weakly random perturbation A_eta = A_per + eta A_1 + R_eta.
//!
//! Correctors at three levels (eta, zero, one), the discrete homogenized
//! matrices built from them, the limit matrix of the first-order term and the
//! second-order residual diagnostics.

use crate::fem::{check_unit, DofField, FemError, P1Space, SolverOptions, StiffnessMatrix};
use crate::fields::{element_draws, FieldError, Model1Coefficients, Realization, MODEL1_SLOTS};
use crate::mesh::{build_unit_mesh, replicate, MeshError};
use crate::small::{SMat, SVec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("residual normalization is undefined at eta = 0")]
    ZeroEta,
    #[error("inputs live on different meshes: {0}")]
    MeshMismatch(String),
    #[error("normalization matrix is singular (det = {det:e})")]
    SingularNormalization { det: f64 },
}

/// Which corrector problem a solution belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "level", rename_all = "snake_case")]
pub enum Level {
    Eta { eta: f64 },
    Zero,
    One,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectorSolution {
    pub direction: SVec,
    pub level: Level,
    pub truncation: usize,
    pub subdivisions: usize,
    pub field: DofField,
    /// Piecewise-constant gradient per element of the mesh it was solved on.
    pub gradients: Vec<SVec>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Homogenized matrices and second-order diagnostics for one (omega, eta, h, N).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HomogenizedReport {
    pub model: u8,
    pub eta: f64,
    pub h: f64,
    pub truncation: usize,
    pub seed: u64,
    pub a_eta_star: SMat,
    pub a_per_star: SMat,
    pub a1_star: SMat,
    /// eta^{-2} (A*_eta - A*_per - eta A1*).
    pub residual_matrix: SMat,
    pub residual_max: f64,
    pub residual_frobenius: f64,
    /// eta^{-2} |grad w_eta - grad w0 - eta grad w1|_{L2} / sqrt|Q_N|, per direction.
    pub z_norm: Vec<f64>,
    pub z_norm_max: f64,
    /// eta^{-1} |grad w_eta - grad w0|_{L2} / sqrt|Q_N|, per direction.
    pub v_norm: Vec<f64>,
    pub v_norm_max: f64,
}

pub fn canonical_directions(dim: usize) -> Vec<SVec> {
    (0..dim).map(|i| SVec::unit(dim, i)).collect()
}

/// P1 space on the unit cell Q with s subdivisions per side.
pub fn unit_space(dim: usize, subdivisions: usize) -> Result<P1Space, ModelError> {
    supercell_space(dim, 0, subdivisions)
}

/// P1 space on Q_N with s subdivisions per unit cell side.
pub fn supercell_space(dim: usize, truncation: usize, subdivisions: usize) -> Result<P1Space, ModelError> {
    let base = build_unit_mesh(dim, subdivisions)?;
    Ok(P1Space::new(replicate(&base, truncation as i64)?))
}

/// Evaluates `f(cell-local barycenter, cell draws)` on every element.
pub(crate) fn per_element<T>(space: &P1Space, r: &Realization, slots: usize, f: impl Fn(&SVec, &[f64]) -> T) -> Vec<T> {
    let draws = element_draws(space, r, slots);
    (0..space.n_elements()).map(|e| f(&space.mesh.geometry(e).barycenter, &draws[e])).collect()
}

pub fn element_a_per(coeffs: &Model1Coefficients, space: &P1Space) -> Vec<SMat> {
    (0..space.n_elements()).map(|e| coeffs.a_per_local(&space.mesh.geometry(e).barycenter)).collect()
}

pub fn element_a1(coeffs: &Model1Coefficients, r: &Realization, space: &P1Space) -> Vec<SMat> {
    per_element(space, r, MODEL1_SLOTS, |_, d| coeffs.a1_local(d))
}

pub fn element_a_eta(coeffs: &Model1Coefficients, r: &Realization, eta: f64, space: &P1Space) -> Vec<SMat> {
    per_element(space, r, MODEL1_SLOTS, |y, d| coeffs.a_eta_local(y, d, eta))
}

/// Solves K w = b in the zero-mean space and packages the result.
pub(crate) fn solve_level(
    space: &P1Space,
    k: &StiffnessMatrix,
    b: &[f64],
    p: SVec,
    level: Level,
    opts: &SolverOptions,
) -> Result<CorrectorSolution, ModelError> {
    let solve = space.solve_zero_mean(k, b, opts)?;
    let gradients = space.element_gradients(&solve.field.values)?;
    Ok(CorrectorSolution {
        direction: p,
        level,
        truncation: space.mesh.truncation,
        subdivisions: space.mesh.base.subdivisions,
        field: solve.field,
        gradients,
        iterations: solve.iterations,
        relative_residual: solve.relative_residual,
    })
}

/// Corrector on Q_N for the realized coefficient A_eta(., omega).
pub fn solve_corrector_eta(
    coeffs: &Model1Coefficients,
    r: &Realization,
    eta: f64,
    space: &P1Space,
    p: &SVec,
    opts: &SolverOptions,
) -> Result<CorrectorSolution, ModelError> {
    Ok(solve_correctors_eta_in(coeffs, r, eta, space, std::slice::from_ref(p), opts)?.remove(0))
}

/// Correctors for every canonical direction, sharing one stiffness matrix.
pub fn solve_correctors_eta(
    coeffs: &Model1Coefficients,
    r: &Realization,
    eta: f64,
    space: &P1Space,
    opts: &SolverOptions,
) -> Result<Vec<CorrectorSolution>, ModelError> {
    solve_correctors_eta_in(coeffs, r, eta, space, &canonical_directions(space.dim()), opts)
}

fn solve_correctors_eta_in(
    coeffs: &Model1Coefficients,
    r: &Realization,
    eta: f64,
    space: &P1Space,
    dirs: &[SVec],
    opts: &SolverOptions,
) -> Result<Vec<CorrectorSolution>, ModelError> {
    coeffs.check_eta(eta)?;
    for p in dirs {
        check_unit(p)?;
    }
    let a = element_a_eta(coeffs, r, eta, space);
    let k = space.assemble_stiffness(|e| a[e])?;
    dirs.iter()
        .map(|p| {
            let b = space.assemble_load(|e| a[e], p)?;
            solve_level(space, &k, &b, *p, Level::Eta { eta }, opts)
        })
        .collect()
}

/// Periodic corrector on the unit cell with A_per.
pub fn solve_corrector_0(
    coeffs: &Model1Coefficients,
    unit: &P1Space,
    p: &SVec,
    opts: &SolverOptions,
) -> Result<CorrectorSolution, ModelError> {
    check_unit(p)?;
    let a = element_a_per(coeffs, unit);
    let k = unit.assemble_stiffness(|e| a[e])?;
    let b = unit.assemble_load(|e| a[e], p)?;
    solve_level(unit, &k, &b, *p, Level::Zero, opts)
}

pub fn solve_correctors_0(
    coeffs: &Model1Coefficients,
    unit: &P1Space,
    opts: &SolverOptions,
) -> Result<Vec<CorrectorSolution>, ModelError> {
    canonical_directions(unit.dim()).iter().map(|p| solve_corrector_0(coeffs, unit, p, opts)).collect()
}

/// Gradients of a unit-cell field carried periodically onto every cell of Q_N.
pub fn replicate_gradients(space: &P1Space, unit_gradients: &[SVec]) -> Result<Vec<SVec>, ModelError> {
    let base_cells = space.mesh.base.n_cells();
    if unit_gradients.len() != base_cells {
        return Err(ModelError::MeshMismatch(format!(
            "unit field has {} elements, base mesh has {base_cells}",
            unit_gradients.len()
        )));
    }
    Ok(space.mesh.cell_origin.iter().map(|o| unit_gradients[o.base_cell]).collect())
}

/// First-order corrector on Q_N: stiffness A_per, load A_1 (p + grad w0).
pub fn solve_corrector_1(
    coeffs: &Model1Coefficients,
    r: &Realization,
    space: &P1Space,
    w0: &CorrectorSolution,
    opts: &SolverOptions,
) -> Result<CorrectorSolution, ModelError> {
    let a_per = element_a_per(coeffs, space);
    let k = space.assemble_stiffness(|e| a_per[e])?;
    let a1 = element_a1(coeffs, r, space);
    solve_corrector_1_with(space, &k, &a1, w0, opts)
}

pub(crate) fn solve_corrector_1_with(
    space: &P1Space,
    k_per: &StiffnessMatrix,
    a1: &[SMat],
    w0: &CorrectorSolution,
    opts: &SolverOptions,
) -> Result<CorrectorSolution, ModelError> {
    let g0 = replicate_gradients(space, &w0.gradients)?;
    let p = w0.direction;
    let b = space.assemble_flux_load(|e| a1[e].mul_vec(&(p + g0[e])))?;
    solve_level(space, k_per, &b, p, Level::One, opts)
}

/// (1/|Q_N|) sum_T |T| e_i . A_T (e_j + grad w_j).
pub(crate) fn average_flux_matrix(space: &P1Space, a: &[SMat], grads: &[&[SVec]]) -> SMat {
    let dim = space.dim();
    let mut out = SMat::zeros(dim);
    for (j, g) in grads.iter().enumerate() {
        let ej = SVec::unit(dim, j);
        let flux = space.integrate(SVec::zeros(dim), |e| a[e].mul_vec(&(ej + g[e])));
        for i in 0..dim {
            out.m[i][j] = flux.v[i] / space.volume();
        }
    }
    out
}

fn check_directions(correctors: &[CorrectorSolution], dim: usize) -> Result<(), ModelError> {
    let ok = correctors.len() == dim
        && correctors.iter().enumerate().all(|(j, c)| c.direction == SVec::unit(dim, j));
    if ok {
        Ok(())
    } else {
        Err(ModelError::MeshMismatch("homogenized matrices need one corrector per canonical direction".into()))
    }
}

pub(crate) fn check_on(space: &P1Space, c: &CorrectorSolution) -> Result<(), ModelError> {
    if c.gradients.len() != space.n_elements() {
        return Err(ModelError::MeshMismatch(format!(
            "corrector has {} elements, mesh has {}",
            c.gradients.len(),
            space.n_elements()
        )));
    }
    Ok(())
}

/// A*_eta^{h,N}(omega).
pub fn homogenized_eta(
    coeffs: &Model1Coefficients,
    r: &Realization,
    eta: f64,
    space: &P1Space,
    correctors: &[CorrectorSolution],
) -> Result<SMat, ModelError> {
    coeffs.check_eta(eta)?;
    check_directions(correctors, space.dim())?;
    for c in correctors {
        check_on(space, c)?;
    }
    let a = element_a_eta(coeffs, r, eta, space);
    let grads: Vec<&[SVec]> = correctors.iter().map(|c| c.gradients.as_slice()).collect();
    Ok(average_flux_matrix(space, &a, &grads))
}

/// A*_per^h on the unit cell.
pub fn homogenized_per(coeffs: &Model1Coefficients, unit: &P1Space, w0: &[CorrectorSolution]) -> Result<SMat, ModelError> {
    check_directions(w0, unit.dim())?;
    for c in w0 {
        check_on(unit, c)?;
    }
    let a = element_a_per(coeffs, unit);
    let grads: Vec<&[SVec]> = w0.iter().map(|c| c.gradients.as_slice()).collect();
    Ok(average_flux_matrix(unit, &a, &grads))
}

pub(crate) fn first_order_with(space: &P1Space, a_per: &[SMat], a1: &[SMat], g0: &[Vec<SVec>], w1: &[CorrectorSolution]) -> SMat {
    let dim = space.dim();
    let mut out = SMat::zeros(dim);
    for j in 0..dim {
        let ej = SVec::unit(dim, j);
        let flux = space.integrate(SVec::zeros(dim), |e| a_per[e].mul_vec(&w1[j].gradients[e]) + a1[e].mul_vec(&(g0[j][e] + ej)));
        for i in 0..dim {
            out.m[i][j] = flux.v[i] / space.volume();
        }
    }
    out
}

/// A1*^{h,N}(omega).
pub fn homogenized_first_order(
    coeffs: &Model1Coefficients,
    r: &Realization,
    space: &P1Space,
    w0: &[CorrectorSolution],
    w1: &[CorrectorSolution],
) -> Result<SMat, ModelError> {
    check_directions(w0, space.dim())?;
    check_directions(w1, space.dim())?;
    for c in w1 {
        check_on(space, c)?;
    }
    let g0 = w0.iter().map(|c| replicate_gradients(space, &c.gradients)).collect::<Result<Vec<_>, _>>()?;
    let a_per = element_a_per(coeffs, space);
    let a1 = element_a1(coeffs, r, space);
    Ok(first_order_with(space, &a_per, &a1, &g0, w1))
}

/// Deterministic limit int_Q (e_i + grad w0_i)^T E(A_1) (e_j + grad w0_j).
pub fn lemma21_limit(coeffs: &Model1Coefficients, unit: &P1Space, w0: &[CorrectorSolution]) -> Result<SMat, ModelError> {
    let dim = unit.dim();
    check_directions(w0, dim)?;
    for c in w0 {
        check_on(unit, c)?;
    }
    let ea1 = coeffs.expected_a1();
    let mut out = SMat::zeros(dim);
    for i in 0..dim {
        for j in 0..dim {
            let (ei, ej) = (SVec::unit(dim, i), SVec::unit(dim, j));
            out.m[i][j] = unit.integrate(0.0, |e| (ei + w0[i].gradients[e]).dot(&ea1.mul_vec(&(ej + w0[j].gradients[e]))))
                / unit.volume();
        }
    }
    Ok(out)
}

/// Everything [`residual_report`] needs for one (omega, eta, h, N).
pub struct ReportInputs<'a> {
    pub model: u8,
    pub seed: u64,
    pub eta: f64,
    pub space: &'a P1Space,
    pub a_eta_star: SMat,
    pub a_per_star: SMat,
    pub a1_star: SMat,
    /// Q_N gradients per direction.
    pub w_eta: &'a [Vec<SVec>],
    /// Unit-cell gradients per direction.
    pub w0: &'a [Vec<SVec>],
    /// Q_N gradients per direction.
    pub w1: &'a [Vec<SVec>],
}

pub fn residual_report(inp: ReportInputs<'_>) -> Result<HomogenizedReport, ModelError> {
    let eta = inp.eta;
    if eta == 0.0 {
        return Err(ModelError::ZeroEta);
    }
    let space = inp.space;
    let scale = space.volume().sqrt();
    let residual_matrix = (inp.a_eta_star - inp.a_per_star - inp.a1_star.scale(eta)).scale(1.0 / (eta * eta));
    let mut z_norm = Vec::new();
    let mut v_norm = Vec::new();
    for ((we, w0), w1) in inp.w_eta.iter().zip(inp.w0).zip(inp.w1) {
        let g0 = replicate_gradients(space, w0)?;
        let v: Vec<SVec> = (0..space.n_elements()).map(|e| we[e] - g0[e]).collect();
        let z: Vec<SVec> = (0..space.n_elements()).map(|e| v[e] - w1[e].scale(eta)).collect();
        v_norm.push(space.grad_l2_norm(&v)? / (eta.abs() * scale));
        z_norm.push(space.grad_l2_norm(&z)? / (eta * eta * scale));
    }
    Ok(HomogenizedReport {
        model: inp.model,
        eta,
        h: space.mesh.base.h,
        truncation: space.mesh.truncation,
        seed: inp.seed,
        a_eta_star: inp.a_eta_star,
        a_per_star: inp.a_per_star,
        a1_star: inp.a1_star,
        residual_max: residual_matrix.max_abs(),
        residual_frobenius: residual_matrix.frobenius(),
        residual_matrix,
        z_norm_max: z_norm.iter().cloned().fold(0.0, f64::max),
        z_norm,
        v_norm_max: v_norm.iter().cloned().fold(0.0, f64::max),
        v_norm,
    })
}

/// Deterministic pieces for one (N, s), reused across seeds and eta values.
pub struct Model1Pipeline {
    pub coeffs: Model1Coefficients,
    pub unit: P1Space,
    pub w0: Vec<CorrectorSolution>,
    pub a_per_star: SMat,
    pub space: P1Space,
    a_per: Vec<SMat>,
    k_per: StiffnessMatrix,
    g0: Vec<Vec<SVec>>,
}

/// First-order corrector and matrix for one realization.
pub struct FirstOrder {
    pub w1: Vec<CorrectorSolution>,
    pub a1_star: SMat,
}

impl Model1Pipeline {
    pub fn new(coeffs: Model1Coefficients, truncation: usize, subdivisions: usize, opts: &SolverOptions) -> Result<Self, ModelError> {
        let dim = coeffs.dim;
        let unit = unit_space(dim, subdivisions)?;
        let w0 = solve_correctors_0(&coeffs, &unit, opts)?;
        let a_per_star = homogenized_per(&coeffs, &unit, &w0)?;
        let space = supercell_space(dim, truncation, subdivisions)?;
        let a_per = element_a_per(&coeffs, &space);
        let k_per = space.assemble_stiffness(|e| a_per[e])?;
        let g0 = w0.iter().map(|c| replicate_gradients(&space, &c.gradients)).collect::<Result<Vec<_>, _>>()?;
        Ok(Model1Pipeline { coeffs, unit, w0, a_per_star, space, a_per, k_per, g0 })
    }

    pub fn correctors_eta(&self, r: &Realization, eta: f64, opts: &SolverOptions) -> Result<(Vec<CorrectorSolution>, SMat), ModelError> {
        let w = solve_correctors_eta(&self.coeffs, r, eta, &self.space, opts)?;
        let a = homogenized_eta(&self.coeffs, r, eta, &self.space, &w)?;
        Ok((w, a))
    }

    pub fn first_order(&self, r: &Realization, opts: &SolverOptions) -> Result<FirstOrder, ModelError> {
        let a1 = element_a1(&self.coeffs, r, &self.space);
        let w1 = self
            .w0
            .iter()
            .map(|w0| solve_corrector_1_with(&self.space, &self.k_per, &a1, w0, opts))
            .collect::<Result<Vec<_>, _>>()?;
        let a1_star = first_order_with(&self.space, &self.a_per, &a1, &self.g0, &w1);
        Ok(FirstOrder { w1, a1_star })
    }

    pub fn lemma21_limit(&self) -> Result<SMat, ModelError> {
        lemma21_limit(&self.coeffs, &self.unit, &self.w0)
    }

    /// All three levels and the residual diagnostics.
    pub fn report(&self, r: &Realization, eta: f64, opts: &SolverOptions) -> Result<HomogenizedReport, ModelError> {
        let first = self.first_order(r, opts)?;
        self.report_with(r, eta, &first, opts)
    }

    pub fn report_with(&self, r: &Realization, eta: f64, first: &FirstOrder, opts: &SolverOptions) -> Result<HomogenizedReport, ModelError> {
        if eta == 0.0 {
            return Err(ModelError::ZeroEta);
        }
        let (w, a_eta_star) = self.correctors_eta(r, eta, opts)?;
        let w_eta: Vec<Vec<SVec>> = w.into_iter().map(|c| c.gradients).collect();
        let w0: Vec<Vec<SVec>> = self.w0.iter().map(|c| c.gradients.clone()).collect();
        let w1: Vec<Vec<SVec>> = first.w1.iter().map(|c| c.gradients.clone()).collect();
        residual_report(ReportInputs {
            model: 1,
            seed: r.seed,
            eta,
            space: &self.space,
            a_eta_star,
            a_per_star: self.a_per_star,
            a1_star: first.a1_star,
            w_eta: &w_eta,
            w0: &w0,
            w1: &w1,
        })
    }
}
