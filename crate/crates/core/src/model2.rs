//! Model 2: periodic coefficient composed with a random diffeomorphism.
//!
//! Everything is computed on the reference side through F = grad Phi_eta:
//! the corrector problem uses det(F) F^{-T} A_per F^{-1}, so Phi_eta is never
//! inverted.

use crate::fem::{check_unit, FemError, P1Space, SolverOptions, StiffnessMatrix};
use crate::fields::{Model1Coefficients, Model1Params, Model2Diffeomorphism, Realization, Remainder};
use crate::model1::{
    canonical_directions, check_on, element_a_per, per_element, replicate_gradients, residual_report,
    solve_correctors_0, solve_level, supercell_space, unit_space, CorrectorSolution, HomogenizedReport, Level, ModelError,
    ReportInputs,
};
use crate::small::{SMat, SVec};
use serde::{Deserialize, Serialize};

/// Outer normalization of the Model-2 homogenized matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// det(int_{Q_N} F)^{-1} int_{Q_N} det(F) (...), integrals un-normalized.
    AsPrinted,
    /// det(mean F)^{-1} mean(det(F) (...)); reduces to the plain average for Phi = Id.
    #[default]
    VolumeNormalized,
}

/// Sign of the int A_per grad(Psi) grad(w0) . grad(phi) term in the first-order corrector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstOrderSign {
    /// Minus, as obtained by expanding the eta-corrector problem to first order.
    #[default]
    Derived,
    /// Plus.
    Plus,
}

/// Per-element pieces of det(F) F^{-T} A_per F^{-1} at barycenters.
#[derive(Clone, Debug)]
pub struct TransformedCoefficient {
    pub grad_phi: Vec<SMat>,
    pub det: Vec<f64>,
    pub inverse: Vec<SMat>,
    pub a_per: Vec<SMat>,
    pub effective: Vec<SMat>,
}

impl TransformedCoefficient {
    pub fn new(diffeo: &Model2Diffeomorphism, r: &Realization, eta: f64, space: &P1Space) -> Result<Self, ModelError> {
        diffeo.check_eta(eta)?;
        let dim = space.dim();
        let grad_phi = per_element(space, r, diffeo.slots(), |y, d| diffeo.grad_phi_local(y, d, eta));
        let mut det = Vec::with_capacity(grad_phi.len());
        let mut inverse = Vec::with_capacity(grad_phi.len());
        let mut a_per = Vec::with_capacity(grad_phi.len());
        let mut effective = Vec::with_capacity(grad_phi.len());
        for (e, f) in grad_phi.iter().enumerate() {
            let j = f.det();
            let finv = match f.inverse() {
                Some(m) if j > 0.0 => m,
                _ => return Err(FemError::NotCoercive { element: e, eigenvalue: j }.into()),
            };
            let a = diffeo.params.profile.eval_local(dim, &space.mesh.geometry(e).barycenter);
            let b = (finv.transpose() * a * finv).scale(j);
            det.push(j);
            inverse.push(finv);
            a_per.push(a);
            effective.push(b.sym_part());
        }
        Ok(TransformedCoefficient { grad_phi, det, inverse, a_per, effective })
    }

    /// det(F) F^{-T} A_per p.
    pub fn load_flux(&self, e: usize, p: &SVec) -> SVec {
        self.inverse[e].transpose().mul_vec(&self.a_per[e].mul_vec(p)).scale(self.det[e])
    }
}

/// Model-1 view of the periodic part, used for the unperturbed correctors.
pub fn a_per_family(diffeo: &Model2Diffeomorphism) -> Result<Model1Coefficients, ModelError> {
    Ok(Model1Coefficients::new(
        diffeo.dim,
        Model1Params {
            profile: diffeo.params.profile.clone(),
            amplitude: 0.0,
            mean_shift: 0.0,
            remainder: Remainder::None,
            eta_max: 1.0,
        },
    )?)
}

/// eta-corrector for the transformed problem.
pub fn solve_corrector_eta_diffeo(
    diffeo: &Model2Diffeomorphism,
    r: &Realization,
    eta: f64,
    space: &P1Space,
    p: &SVec,
    opts: &SolverOptions,
) -> Result<CorrectorSolution, ModelError> {
    Ok(solve_in(diffeo, r, eta, space, std::slice::from_ref(p), opts)?.0.remove(0))
}

pub fn solve_correctors_eta_diffeo(
    diffeo: &Model2Diffeomorphism,
    r: &Realization,
    eta: f64,
    space: &P1Space,
    opts: &SolverOptions,
) -> Result<(Vec<CorrectorSolution>, TransformedCoefficient), ModelError> {
    solve_in(diffeo, r, eta, space, &canonical_directions(space.dim()), opts)
}

fn solve_in(
    diffeo: &Model2Diffeomorphism,
    r: &Realization,
    eta: f64,
    space: &P1Space,
    dirs: &[SVec],
    opts: &SolverOptions,
) -> Result<(Vec<CorrectorSolution>, TransformedCoefficient), ModelError> {
    for p in dirs {
        check_unit(p)?;
    }
    let tc = TransformedCoefficient::new(diffeo, r, eta, space)?;
    let k = space.assemble_stiffness(|e| tc.effective[e])?;
    let sols = dirs
        .iter()
        .map(|p| {
            let b = space.assemble_flux_load(|e| tc.load_flux(e, p))?;
            solve_level(space, &k, &b, *p, Level::Eta { eta }, opts)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((sols, tc))
}

/// Homogenized matrix from the determinant-weighted formula.
pub fn homogenized_eta_diffeo(
    space: &P1Space,
    tc: &TransformedCoefficient,
    correctors: &[CorrectorSolution],
    normalization: Normalization,
) -> Result<SMat, ModelError> {
    let dim = space.dim();
    if correctors.len() != dim {
        return Err(ModelError::MeshMismatch("need one corrector per canonical direction".into()));
    }
    for c in correctors {
        check_on(space, c)?;
    }
    let jac = space.integrate(SMat::zeros(dim), |e| tc.grad_phi[e]);
    let mut m = SMat::zeros(dim);
    for i in 0..dim {
        let ei = SVec::unit(dim, i);
        let g = &correctors[i].gradients;
        let row = space.integrate(SVec::zeros(dim), |e| {
            // Row i of the integrand: (e_i + F^{-1} grad w_i)^T A_per, weighted by det F.
            tc.a_per[e].transpose().mul_vec(&(ei + tc.inverse[e].mul_vec(&g[e]))).scale(tc.det[e])
        });
        for j in 0..dim {
            m.m[i][j] = row.v[j];
        }
    }
    let (outer, inner) = match normalization {
        Normalization::AsPrinted => (jac.det(), 1.0),
        Normalization::VolumeNormalized => (jac.scale(1.0 / space.volume()).det(), space.volume()),
    };
    if !(outer.abs() > 1e-300) || !outer.is_finite() {
        return Err(ModelError::SingularNormalization { det: outer });
    }
    Ok(m.scale(1.0 / (outer * inner)))
}

/// grad Psi and div Psi per element, from the generator.
pub fn element_grad_psi(diffeo: &Model2Diffeomorphism, r: &Realization, space: &P1Space) -> Vec<SMat> {
    per_element(space, r, diffeo.slots(), |y, d| diffeo.grad_psi_local(y, d))
}

/// First-order corrector for Model 2.
pub fn solve_corrector_1_diffeo(
    diffeo: &Model2Diffeomorphism,
    r: &Realization,
    space: &P1Space,
    w0: &CorrectorSolution,
    sign: FirstOrderSign,
    opts: &SolverOptions,
) -> Result<CorrectorSolution, ModelError> {
    let a_per = element_a_per(&a_per_family(diffeo)?, space);
    let k = space.assemble_stiffness(|e| a_per[e])?;
    let g = element_grad_psi(diffeo, r, space);
    solve_corrector_1_with(space, &k, &a_per, &g, w0, sign, opts)
}

fn solve_corrector_1_with(
    space: &P1Space,
    k_per: &StiffnessMatrix,
    a_per: &[SMat],
    grad_psi: &[SMat],
    w0: &CorrectorSolution,
    sign: FirstOrderSign,
    opts: &SolverOptions,
) -> Result<CorrectorSolution, ModelError> {
    let dim = space.dim();
    let g0 = replicate_gradients(space, &w0.gradients)?;
    let p = w0.direction;
    let s = match sign {
        FirstOrderSign::Derived => -1.0,
        FirstOrderSign::Plus => 1.0,
    };
    let b = space.assemble_flux_load(|e| {
        let g = grad_psi[e];
        let shear = a_per[e].mul_vec(&g.mul_vec(&g0[e])).scale(s);
        let dilation = (SMat::scalar(dim, g.trace()) - g.transpose()).mul_vec(&a_per[e].mul_vec(&(p + g0[e])));
        shear + dilation
    })?;
    solve_level(space, k_per, &b, p, Level::One, opts)
}

fn first_order_with(
    space: &P1Space,
    a_per: &[SMat],
    grad_psi: &[SMat],
    g0: &[Vec<SVec>],
    w1: &[CorrectorSolution],
    a_per_star: &SMat,
) -> SMat {
    let dim = space.dim();
    let vol = space.volume();
    let mean_div = space.integrate(0.0, |e| grad_psi[e].trace()) / vol;
    let mut out = SMat::zeros(dim);
    for i in 0..dim {
        let ei = SVec::unit(dim, i);
        let row = space.integrate(SVec::zeros(dim), |e| {
            let g = grad_psi[e];
            let at = a_per[e].transpose();
            at.mul_vec(&(ei + g0[i][e])).scale(g.trace()) + at.mul_vec(&(w1[i].gradients[e] - g.mul_vec(&g0[i][e])))
        });
        for j in 0..dim {
            out.m[i][j] = -a_per_star.m[i][j] * mean_div + row.v[j] / vol;
        }
    }
    out
}

/// A1*^{h,N}(omega) for Model 2.
pub fn homogenized_first_order_diffeo(
    diffeo: &Model2Diffeomorphism,
    r: &Realization,
    space: &P1Space,
    w0: &[CorrectorSolution],
    w1: &[CorrectorSolution],
    a_per_star: &SMat,
) -> Result<SMat, ModelError> {
    let dim = space.dim();
    if w0.len() != dim || w1.len() != dim {
        return Err(ModelError::MeshMismatch("need one corrector per canonical direction".into()));
    }
    for c in w1 {
        check_on(space, c)?;
    }
    let g0 = w0.iter().map(|c| replicate_gradients(space, &c.gradients)).collect::<Result<Vec<_>, _>>()?;
    let a_per = element_a_per(&a_per_family(diffeo)?, space);
    let g = element_grad_psi(diffeo, r, space);
    Ok(first_order_with(space, &a_per, &g, &g0, w1, a_per_star))
}

/// Sampled checks of the expansion of F^{-1} and det F, per eta.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma31Level {
    pub eta: f64,
    /// sup |Gamma_eta| (operator norm).
    pub gamma_sup: f64,
    /// sup |sigma_eta|.
    pub sigma_sup: f64,
    pub eig_min: f64,
    pub eig_max: f64,
    pub eig_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma31Record {
    pub samples: usize,
    pub levels: Vec<Lemma31Level>,
    /// max/min over eta of sup |Gamma|/eta^2.
    pub gamma_band: f64,
    /// max/min over eta of sup |sigma|/eta^2.
    pub sigma_band: f64,
    pub eigen_pass: bool,
    pub gamma_pass: bool,
    pub sigma_pass: bool,
    pub pass: bool,
}

/// Quantities below this are treated as identically zero in the band ratios.
const BAND_FLOOR: f64 = 1e-12;

/// max/min of positive values, 1 when all are negligible, infinite when only some are.
pub fn band_ratio(values: &[f64]) -> f64 {
    let hi = values.iter().cloned().fold(0.0, f64::max);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi <= BAND_FLOOR {
        1.0
    } else if lo <= BAND_FLOOR {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Samples x uniformly in [-5/2, 5/2]^d; the band tolerance is a factor 4.
pub fn lemma31_validate(diffeo: &Model2Diffeomorphism, r: &Realization, eta_grid: &[f64], samples: usize) -> Lemma31Record {
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;
    let dim = diffeo.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed ^ 0x1e33_a31_0000_0031);
    let points: Vec<SVec> = (0..samples)
        .map(|_| {
            let xs: Vec<f64> = (0..dim).map(|_| 5.0 * crate::fields::unit_interval(&mut rng) - 2.5).collect();
            SVec::from_slice(&xs)
        })
        .collect();
    let levels: Vec<Lemma31Level> = eta_grid
        .iter()
        .map(|&eta| {
            let mut lvl = Lemma31Level { eta, gamma_sup: 0.0, sigma_sup: 0.0, eig_min: f64::INFINITY, eig_max: 0.0, eig_ok: true };
            for x in &points {
                let f = diffeo.grad_phi(x, r, eta);
                let Some(finv) = f.inverse() else {
                    lvl.eig_ok = false;
                    lvl.eig_min = f64::NEG_INFINITY;
                    continue;
                };
                lvl.gamma_sup = lvl.gamma_sup.max(diffeo.gamma(x, r, eta).op_norm());
                lvl.sigma_sup = lvl.sigma_sup.max(diffeo.sigma(x, r, eta).abs());
                let ev = (finv.transpose() * finv).sym_eigenvalues();
                lvl.eig_min = lvl.eig_min.min(ev[0]);
                lvl.eig_max = lvl.eig_max.max(ev[dim - 1]);
            }
            lvl.eig_ok = lvl.eig_ok && lvl.eig_min >= 0.5 && lvl.eig_max <= 1.5;
            lvl
        })
        .collect();
    let scaled = |f: &dyn Fn(&Lemma31Level) -> f64| -> Vec<f64> {
        levels.iter().filter(|l| l.eta != 0.0).map(|l| f(l) / (l.eta * l.eta)).collect()
    };
    let gamma_band = band_ratio(&scaled(&|l| l.gamma_sup));
    let sigma_band = band_ratio(&scaled(&|l| l.sigma_sup));
    let eigen_pass = levels.iter().all(|l| l.eig_ok);
    let gamma_pass = gamma_band <= 4.0;
    let sigma_pass = sigma_band <= 4.0;
    Lemma31Record { samples, levels, gamma_band, sigma_band, eigen_pass, gamma_pass, sigma_pass, pass: eigen_pass && gamma_pass && sigma_pass }
}

/// Residual diagnostics for Model 2; see [`residual_report`].
pub fn residual_report_diffeo(inp: ReportInputs<'_>) -> Result<HomogenizedReport, ModelError> {
    residual_report(ReportInputs { model: 2, ..inp })
}

/// Deterministic pieces for one (N, s), reused across seeds and eta values.
pub struct Model2Pipeline {
    pub diffeo: Model2Diffeomorphism,
    pub normalization: Normalization,
    pub sign: FirstOrderSign,
    pub unit: P1Space,
    pub w0: Vec<CorrectorSolution>,
    pub a_per_star: SMat,
    pub space: P1Space,
    a_per: Vec<SMat>,
    k_per: StiffnessMatrix,
    g0: Vec<Vec<SVec>>,
}

pub struct FirstOrderDiffeo {
    pub w1: Vec<CorrectorSolution>,
    pub a1_star: SMat,
}

impl Model2Pipeline {
    pub fn new(
        diffeo: Model2Diffeomorphism,
        normalization: Normalization,
        truncation: usize,
        subdivisions: usize,
        opts: &SolverOptions,
    ) -> Result<Self, ModelError> {
        let dim = diffeo.dim;
        let per = a_per_family(&diffeo)?;
        let unit = unit_space(dim, subdivisions)?;
        let w0 = solve_correctors_0(&per, &unit, opts)?;
        let a_per_star = crate::model1::homogenized_per(&per, &unit, &w0)?;
        let space = supercell_space(dim, truncation, subdivisions)?;
        let a_per = element_a_per(&per, &space);
        let k_per = space.assemble_stiffness(|e| a_per[e])?;
        let g0 = w0.iter().map(|c| replicate_gradients(&space, &c.gradients)).collect::<Result<Vec<_>, _>>()?;
        Ok(Model2Pipeline { diffeo, normalization, sign: FirstOrderSign::Derived, unit, w0, a_per_star, space, a_per, k_per, g0 })
    }

    pub fn with_sign(mut self, sign: FirstOrderSign) -> Self {
        self.sign = sign;
        self
    }

    pub fn correctors_eta(&self, r: &Realization, eta: f64, opts: &SolverOptions) -> Result<(Vec<CorrectorSolution>, SMat), ModelError> {
        let (w, tc) = solve_correctors_eta_diffeo(&self.diffeo, r, eta, &self.space, opts)?;
        let a = homogenized_eta_diffeo(&self.space, &tc, &w, self.normalization)?;
        Ok((w, a))
    }

    pub fn first_order(&self, r: &Realization, opts: &SolverOptions) -> Result<FirstOrderDiffeo, ModelError> {
        let g = element_grad_psi(&self.diffeo, r, &self.space);
        let w1 = self
            .w0
            .iter()
            .map(|w0| solve_corrector_1_with(&self.space, &self.k_per, &self.a_per, &g, w0, self.sign, opts))
            .collect::<Result<Vec<_>, _>>()?;
        let a1_star = first_order_with(&self.space, &self.a_per, &g, &self.g0, &w1, &self.a_per_star);
        Ok(FirstOrderDiffeo { w1, a1_star })
    }

    pub fn report(&self, r: &Realization, eta: f64, opts: &SolverOptions) -> Result<HomogenizedReport, ModelError> {
        let first = self.first_order(r, opts)?;
        self.report_with(r, eta, &first, opts)
    }

    pub fn report_with(&self, r: &Realization, eta: f64, first: &FirstOrderDiffeo, opts: &SolverOptions) -> Result<HomogenizedReport, ModelError> {
        if eta == 0.0 {
            return Err(ModelError::ZeroEta);
        }
        let (w, a_eta_star) = self.correctors_eta(r, eta, opts)?;
        let w_eta: Vec<Vec<SVec>> = w.into_iter().map(|c| c.gradients).collect();
        let w0: Vec<Vec<SVec>> = self.w0.iter().map(|c| c.gradients.clone()).collect();
        let w1: Vec<Vec<SVec>> = first.w1.iter().map(|c| c.gradients.clone()).collect();
        residual_report_diffeo(ReportInputs {
            model: 2,
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
