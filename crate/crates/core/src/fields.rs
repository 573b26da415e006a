//! Discretely stationary random inputs.
//!
//! A [`Realization`] hands out i.i.d. uniforms on [-1, 1] per lattice cell from
//! a counter-based generator keyed by (seed, cell, slot). The lattice shift
//! acts by offsetting the cell index, so `F(x + k, w) = F(x, tau_k w)` holds
//! exactly for every field built from cell draws.

use crate::fem::P1Space;
use crate::mesh::LatticeVec;
use crate::small::{SMat, SVec};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("profile {profile} is not defined in dimension {dim}")]
    ProfileDimension { profile: &'static str, dim: usize },
    #[error("invalid profile parameters: {0}")]
    InvalidProfile(String),
    #[error("family violates uniform coercivity for |eta| <= {eta_max}: lower bound {gamma}")]
    NotCoercive { gamma: f64, eta_max: f64 },
    #[error("eta exceeds family validity: |{eta}| > {eta_max}")]
    EtaOutOfRange { eta: f64, eta_max: f64 },
    #[error("diffeomorphism degenerates for |eta| <= {eta_max}: min det = {nu}")]
    Degenerate { nu: f64, eta_max: f64 },
    #[error("invalid family parameter: {0}")]
    InvalidParameter(String),
}

/// One sample omega of the probability space, viewed through its cell draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Realization {
    pub seed: u64,
    offset: [i64; 2],
}

impl Realization {
    pub fn new(seed: u64) -> Self {
        Realization { seed, offset: [0, 0] }
    }

    /// The shifted sample tau_k(omega).
    pub fn shift(&self, k: LatticeVec) -> Realization {
        Realization { seed: self.seed, offset: [self.offset[0] + k.0[0], self.offset[1] + k.0[1]] }
    }

    /// Uniform on [-1, 1] for cell `k` and draw index `slot`.
    pub fn uniform(&self, k: LatticeVec, slot: usize) -> f64 {
        let cell = [k.0[0] + self.offset[0], k.0[1] + self.offset[1]];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // One stream per cell; cell indices are assumed to fit in i32.
        let stream = (cell[0] as i32 as u32 as u64) | ((cell[1] as i32 as u32 as u64) << 32);
        rng.set_stream(stream);
        rng.set_word_pos(2 * slot as u128);
        let bits = rng.next_u64() >> 11;
        2.0 * (bits as f64 * (1.0 / (1u64 << 53) as f64)) - 1.0
    }

    /// The first `count` draws of cell `k`.
    pub fn cell_draw(&self, k: LatticeVec, count: usize) -> Vec<f64> {
        (0..count).map(|s| self.uniform(k, s)).collect()
    }
}

/// Named periodic profiles for A_per on the unit cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PeriodicProfile {
    /// Constant diagonal matrix.
    Constant { diag: Vec<f64> },
    /// 1D: `low` on y < 0, `high` on y >= 0.
    TwoPhase { low: f64, high: f64 },
    /// 2D: a(y1) I with a = `low` on y1 < 0, `high` on y1 >= 0.
    Laminate { low: f64, high: f64 },
    /// 2D: `high` on the quadrants where y1 y2 > 0, `low` elsewhere.
    Checkerboard { low: f64, high: f64 },
}

impl PeriodicProfile {
    pub fn name(&self) -> &'static str {
        match self {
            PeriodicProfile::Constant { .. } => "constant",
            PeriodicProfile::TwoPhase { .. } => "two_phase",
            PeriodicProfile::Laminate { .. } => "laminate",
            PeriodicProfile::Checkerboard { .. } => "checkerboard",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), FieldError> {
        let ok_dim = match self {
            PeriodicProfile::Constant { diag } => {
                if diag.len() != dim {
                    return Err(FieldError::InvalidProfile(format!(
                        "constant profile needs {dim} diagonal entries, got {}",
                        diag.len()
                    )));
                }
                true
            }
            PeriodicProfile::TwoPhase { .. } => dim == 1,
            PeriodicProfile::Laminate { .. } | PeriodicProfile::Checkerboard { .. } => dim == 2,
        };
        if !ok_dim {
            return Err(FieldError::ProfileDimension { profile: self.name(), dim });
        }
        let (lo, hi) = self.eigen_bounds();
        if !(lo > 0.0 && hi.is_finite()) {
            return Err(FieldError::InvalidProfile(format!("{} needs positive finite values", self.name())));
        }
        Ok(())
    }

    /// Extreme eigenvalues over the cell.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        match self {
            PeriodicProfile::Constant { diag } => {
                (diag.iter().cloned().fold(f64::INFINITY, f64::min), diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            }
            PeriodicProfile::TwoPhase { low, high }
            | PeriodicProfile::Laminate { low, high }
            | PeriodicProfile::Checkerboard { low, high } => (low.min(*high), low.max(*high)),
        }
    }

    /// Value at cell-local coordinates y in [-1/2, 1/2)^d.
    pub fn eval_local(&self, dim: usize, y: &SVec) -> SMat {
        match self {
            PeriodicProfile::Constant { diag } => SMat::diag(diag),
            PeriodicProfile::TwoPhase { low, high } | PeriodicProfile::Laminate { low, high } => {
                SMat::scalar(dim, if y.v[0] < 0.0 { *low } else { *high })
            }
            PeriodicProfile::Checkerboard { low, high } => {
                SMat::scalar(dim, if y.v[0] * y.v[1] > 0.0 { *high } else { *low })
            }
        }
    }

    pub fn eval(&self, dim: usize, x: &SVec) -> SMat {
        let k = LatticeVec::containing(x);
        self.eval_local(dim, &(*x - k.as_svec(dim)))
    }
}

/// Whether the Model-1 expansion carries an explicit O(eta^2) remainder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remainder {
    None,
    Quadratic,
}

/// Parameters of the per-cell scalar perturbation family
/// A_eta = A_per + eta b (m + X_k) I + eta^2 b X'_k I.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model1Params {
    pub profile: PeriodicProfile,
    /// b
    pub amplitude: f64,
    /// m, so that E(A_1) = b m I.
    #[serde(default)]
    pub mean_shift: f64,
    pub remainder: Remainder,
    pub eta_max: f64,
}

/// Validated Model-1 coefficient family.
#[derive(Clone, Debug, PartialEq)]
pub struct Model1Coefficients {
    pub dim: usize,
    pub params: Model1Params,
    /// Uniform coercivity constant for |eta| <= eta_max.
    pub gamma: f64,
    /// Uniform bound for |eta| <= eta_max.
    pub bound: f64,
    /// sup over (x, omega) of |A_1|.
    pub a1_sup: f64,
}

/// Draw slots used by Model 1: X_k and X'_k.
pub const MODEL1_SLOTS: usize = 2;

impl Model1Coefficients {
    pub fn new(dim: usize, params: Model1Params) -> Result<Self, FieldError> {
        params.profile.validate(dim)?;
        if !(params.amplitude >= 0.0 && params.amplitude.is_finite()) {
            return Err(FieldError::InvalidParameter(format!("amplitude must be >= 0, got {}", params.amplitude)));
        }
        if !(params.eta_max > 0.0 && params.eta_max.is_finite()) {
            return Err(FieldError::InvalidParameter(format!("eta_max must be > 0, got {}", params.eta_max)));
        }
        let (lo, hi) = params.profile.eigen_bounds();
        let a1_sup = params.amplitude * (params.mean_shift.abs() + 1.0);
        let r_sup = match params.remainder {
            Remainder::None => 0.0,
            Remainder::Quadratic => params.amplitude,
        };
        let spread = a1_sup * params.eta_max + r_sup * params.eta_max * params.eta_max;
        let gamma = lo - spread;
        if gamma <= 0.0 {
            return Err(FieldError::NotCoercive { gamma, eta_max: params.eta_max });
        }
        Ok(Model1Coefficients { dim, params, gamma, bound: hi + spread, a1_sup })
    }

    pub fn check_eta(&self, eta: f64) -> Result<(), FieldError> {
        if !(eta.abs() <= self.params.eta_max) {
            return Err(FieldError::EtaOutOfRange { eta, eta_max: self.params.eta_max });
        }
        Ok(())
    }

    /// sup |eta^{-2} R_eta|.
    pub fn remainder_sup(&self) -> f64 {
        match self.params.remainder {
            Remainder::None => 0.0,
            Remainder::Quadratic => self.params.amplitude,
        }
    }

    pub fn a_per_local(&self, y: &SVec) -> SMat {
        self.params.profile.eval_local(self.dim, y)
    }

    pub fn a1_local(&self, draws: &[f64]) -> SMat {
        SMat::scalar(self.dim, self.params.amplitude * (self.params.mean_shift + draws[0]))
    }

    /// A_2 with R_eta = eta^2 A_2.
    pub fn a2_local(&self, draws: &[f64]) -> SMat {
        match self.params.remainder {
            Remainder::None => SMat::zeros(self.dim),
            Remainder::Quadratic => SMat::scalar(self.dim, self.params.amplitude * draws[1]),
        }
    }

    pub fn a_eta_local(&self, y: &SVec, draws: &[f64], eta: f64) -> SMat {
        self.a_per_local(y) + self.a1_local(draws).scale(eta) + self.a2_local(draws).scale(eta * eta)
    }

    pub fn a_per(&self, x: &SVec) -> SMat {
        self.params.profile.eval(self.dim, x)
    }

    pub fn a1(&self, x: &SVec, r: &Realization) -> SMat {
        self.a1_local(&r.cell_draw(LatticeVec::containing(x), MODEL1_SLOTS))
    }

    pub fn remainder(&self, x: &SVec, r: &Realization, eta: f64) -> SMat {
        self.a2_local(&r.cell_draw(LatticeVec::containing(x), MODEL1_SLOTS)).scale(eta * eta)
    }

    pub fn a_eta(&self, x: &SVec, r: &Realization, eta: f64) -> SMat {
        let k = LatticeVec::containing(x);
        let y = *x - k.as_svec(self.dim);
        self.a_eta_local(&y, &r.cell_draw(k, MODEL1_SLOTS), eta)
    }

    /// E(A_1), known in closed form for this family.
    pub fn expected_a1(&self) -> SMat {
        SMat::scalar(self.dim, self.params.amplitude * self.params.mean_shift)
    }
}

/// Builds the Model-1 family A_1(x, w) = b (m + X_k(w)) I on cell k + Q.
pub fn checkerboard_model1(dim: usize, params: Model1Params) -> Result<Model1Coefficients, FieldError> {
    Model1Coefficients::new(dim, params)
}

/// Quartic bump profile q(s) = (1 - 4 s^2)^2 on [-1/2, 1/2]; C^1 with q = q' = 0 at the ends.
pub fn quartic_bump(s: f64) -> (f64, f64) {
    if s.abs() >= 0.5 {
        return (0.0, 0.0);
    }
    let u = 1.0 - 4.0 * s * s;
    (u * u, -16.0 * s * u)
}

/// theta(y) = prod_a q(y_a) and its gradient.
fn bump(y: &SVec) -> (f64, SVec) {
    let dim = y.dim;
    let qs: Vec<(f64, f64)> = (0..dim).map(|a| quartic_bump(y.v[a])).collect();
    let value: f64 = qs.iter().map(|q| q.0).product();
    let mut grad = SVec::zeros(dim);
    for a in 0..dim {
        grad.v[a] = (0..dim).map(|b| if a == b { qs[b].1 } else { qs[b].0 }).product();
    }
    (value, grad)
}

/// Parameters of the bump diffeomorphism
/// Phi_eta(x) = x + eta Psi(x) + eta^2 t Xi(x), with per-cell bumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model2Params {
    pub profile: PeriodicProfile,
    /// c
    pub amplitude: f64,
    /// t; zero gives Theta_eta = 0.
    #[serde(default)]
    pub theta_amplitude: f64,
    /// Mean added to the Psi draws.
    #[serde(default)]
    pub psi_mean: f64,
    pub eta_max: f64,
}

/// Validated Model-2 diffeomorphism family.
///
/// Gradients use the convention (grad Psi)_{ab} = d_a Psi_b, under which the
/// transformed coefficient is det(F) F^{-T} A_per F^{-1} for F = grad Phi_eta.
#[derive(Clone, Debug, PartialEq)]
pub struct Model2Diffeomorphism {
    pub dim: usize,
    pub params: Model2Params,
    /// Sampled ess inf of det grad Phi_eta over |eta| <= eta_max.
    pub nu: f64,
    /// Sampled ess sup of |grad Phi_eta| over |eta| <= eta_max.
    pub m_prime: f64,
    /// Largest sampled eta for which the eigenvalues of F^{-T} F^{-1} stay in [1/2, 3/2].
    pub eta0: f64,
}

impl Model2Diffeomorphism {
    pub fn new(dim: usize, params: Model2Params) -> Result<Self, FieldError> {
        params.profile.validate(dim)?;
        for (name, v) in [("amplitude", params.amplitude), ("theta_amplitude", params.theta_amplitude)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FieldError::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(params.eta_max > 0.0 && params.eta_max.is_finite()) {
            return Err(FieldError::InvalidParameter(format!("eta_max must be > 0, got {}", params.eta_max)));
        }
        let mut out = Model2Diffeomorphism { dim, params, nu: 1.0, m_prime: 1.0, eta0: 0.0 };
        out.calibrate()?;
        Ok(out)
    }

    /// The identity map (c = t = 0) over the given profile.
    pub fn identity(dim: usize, profile: PeriodicProfile, eta_max: f64) -> Result<Self, FieldError> {
        Self::new(dim, Model2Params { profile, amplitude: 0.0, theta_amplitude: 0.0, psi_mean: 0.0, eta_max })
    }

    pub fn is_identity(&self) -> bool {
        self.params.amplitude == 0.0 && self.params.theta_amplitude == 0.0
    }

    pub fn slots(&self) -> usize {
        2 * self.dim
    }

    /// Samples bump extrema and worst-case draws to fix nu, M' and eta0.
    fn calibrate(&mut self) -> Result<(), FieldError> {
        let dim = self.dim;
        let grid: Vec<f64> = (0..=16).map(|i| -0.5 + i as f64 / 16.0).chain([1.0 / 12f64.sqrt(), -1.0 / 12f64.sqrt()]).collect();
        let points: Vec<SVec> = match dim {
            1 => grid.iter().map(|&a| SVec::from_slice(&[a])).collect(),
            _ => grid.iter().flat_map(|&b| grid.iter().map(move |&a| SVec::from_slice(&[a, b]))).collect(),
        };
        let slots = self.slots();
        let combos: Vec<Vec<f64>> = (0..1usize << slots)
            .map(|mask| (0..slots).map(|s| if mask >> s & 1 == 1 { 1.0 } else { -1.0 }).collect())
            .collect();
        let n_eta = 32;
        let mut nu = f64::INFINITY;
        let mut m_prime = 0.0f64;
        // Worst eigenvalue excursion of F^{-T}F^{-1} per |eta| level.
        let mut level_ok = vec![true; n_eta + 1];
        for y in &points {
            for draws in &combos {
                for j in 0..=n_eta {
                    let e = self.params.eta_max * j as f64 / n_eta as f64;
                    for eta in [e, -e] {
                        let f = self.grad_phi_local(y, draws, eta);
                        let det = f.det();
                        nu = nu.min(det);
                        m_prime = m_prime.max(f.op_norm());
                        if det > 0.0 {
                            let finv = f.inverse().expect("det > 0");
                            let g = finv.transpose() * finv;
                            let ev = g.sym_eigenvalues();
                            if ev[0] < 0.5 || ev[dim - 1] > 1.5 {
                                level_ok[j] = false;
                            }
                        } else {
                            level_ok[j] = false;
                        }
                    }
                }
            }
        }
        if nu <= 0.0 {
            return Err(FieldError::Degenerate { nu, eta_max: self.params.eta_max });
        }
        let first_bad = level_ok.iter().position(|ok| !ok).unwrap_or(n_eta + 1);
        self.nu = nu;
        self.m_prime = m_prime;
        self.eta0 = if first_bad == 0 { 0.0 } else { self.params.eta_max * (first_bad - 1) as f64 / n_eta as f64 };
        Ok(())
    }

    /// Accepts |eta| <= eta0, the validated range.
    pub fn check_eta(&self, eta: f64) -> Result<(), FieldError> {
        if !(eta.abs() <= self.eta0) {
            return Err(FieldError::EtaOutOfRange { eta, eta_max: self.eta0 });
        }
        Ok(())
    }

    /// Psi at cell-local y.
    pub fn psi_local(&self, y: &SVec, draws: &[f64]) -> SVec {
        let (theta, _) = bump(y);
        let mut out = SVec::zeros(self.dim);
        for b in 0..self.dim {
            out.v[b] = self.params.amplitude * (self.params.psi_mean + draws[b]) * theta;
        }
        out
    }

    /// grad Psi at cell-local y, entries d_a Psi_b.
    pub fn grad_psi_local(&self, y: &SVec, draws: &[f64]) -> SMat {
        let (_, g) = bump(y);
        let mut out = SMat::zeros(self.dim);
        for a in 0..self.dim {
            for b in 0..self.dim {
                out.m[a][b] = self.params.amplitude * (self.params.psi_mean + draws[b]) * g.v[a];
            }
        }
        out
    }

    pub fn div_psi_local(&self, y: &SVec, draws: &[f64]) -> f64 {
        self.grad_psi_local(y, draws).trace()
    }

    /// grad Theta_eta at cell-local y.
    pub fn grad_theta_local(&self, y: &SVec, draws: &[f64], eta: f64) -> SMat {
        let mut out = SMat::zeros(self.dim);
        if self.params.theta_amplitude == 0.0 {
            return out;
        }
        let (_, g) = bump(y);
        for a in 0..self.dim {
            for b in 0..self.dim {
                out.m[a][b] = eta * eta * self.params.theta_amplitude * draws[self.dim + b] * g.v[a];
            }
        }
        out
    }

    /// F = grad Phi_eta = I + eta grad Psi + grad Theta_eta.
    pub fn grad_phi_local(&self, y: &SVec, draws: &[f64], eta: f64) -> SMat {
        SMat::identity(self.dim) + self.grad_psi_local(y, draws).scale(eta) + self.grad_theta_local(y, draws, eta)
    }

    fn locate(&self, x: &SVec, r: &Realization) -> (SVec, Vec<f64>) {
        let k = LatticeVec::containing(x);
        (*x - k.as_svec(self.dim), r.cell_draw(k, self.slots()))
    }

    pub fn psi(&self, x: &SVec, r: &Realization) -> SVec {
        let (y, d) = self.locate(x, r);
        self.psi_local(&y, &d)
    }

    pub fn grad_psi(&self, x: &SVec, r: &Realization) -> SMat {
        let (y, d) = self.locate(x, r);
        self.grad_psi_local(&y, &d)
    }

    pub fn div_psi(&self, x: &SVec, r: &Realization) -> f64 {
        self.grad_psi(x, r).trace()
    }

    pub fn grad_phi(&self, x: &SVec, r: &Realization, eta: f64) -> SMat {
        let (y, d) = self.locate(x, r);
        self.grad_phi_local(&y, &d, eta)
    }

    pub fn det_grad_phi(&self, x: &SVec, r: &Realization, eta: f64) -> f64 {
        self.grad_phi(x, r, eta).det()
    }

    /// Gamma_eta = F^{-1} - I + eta grad Psi.
    pub fn gamma(&self, x: &SVec, r: &Realization, eta: f64) -> SMat {
        let (y, d) = self.locate(x, r);
        let finv = self.grad_phi_local(&y, &d, eta).inverse().expect("diffeomorphism is non-degenerate");
        finv - SMat::identity(self.dim) + self.grad_psi_local(&y, &d).scale(eta)
    }

    /// sigma_eta = det F - 1 - eta div Psi.
    pub fn sigma(&self, x: &SVec, r: &Realization, eta: f64) -> f64 {
        let (y, d) = self.locate(x, r);
        self.grad_phi_local(&y, &d, eta).det() - 1.0 - eta * self.div_psi_local(&y, &d)
    }
}

/// Builds the per-cell bump diffeomorphism family.
pub fn bump_model2(dim: usize, params: Model2Params) -> Result<Model2Diffeomorphism, FieldError> {
    Model2Diffeomorphism::new(dim, params)
}

/// Per-element cell draws for a space, grouped by lattice cell.
///
/// Elements of one lattice cell are contiguous in a [`crate::mesh::SuperMesh`],
/// so consecutive lookups reuse the same draws.
pub fn element_draws(space: &P1Space, r: &Realization, slots: usize) -> Vec<Vec<f64>> {
    let mesh = &space.mesh;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(mesh.n_cells());
    let mut last: Option<LatticeVec> = None;
    for e in 0..mesh.n_cells() {
        let k = mesh.cell_origin[e].lattice;
        if last == Some(k) {
            let prev = out[e - 1].clone();
            out.push(prev);
        } else {
            out.push(r.cell_draw(k, slots));
            last = Some(k);
        }
    }
    out
}

/// Values that can be compared in the stationarity check.
pub trait FieldValue {
    fn distance(&self, other: &Self) -> f64;
}

impl FieldValue for f64 {
    fn distance(&self, other: &f64) -> f64 {
        (self - other).abs()
    }
}

impl FieldValue for SVec {
    fn distance(&self, other: &SVec) -> f64 {
        (*self - *other).max_abs()
    }
}

impl FieldValue for SMat {
    fn distance(&self, other: &SMat) -> f64 {
        (*self - *other).max_abs()
    }
}

/// max over sampled x of |F(x + k, w) - F(x, tau_k w)|.
///
/// Sample points are drawn uniformly in [-5/2, 5/2]^d from a generator seeded
/// by the realization seed, so the check is reproducible.
pub fn stationarity_check<T: FieldValue>(
    dim: usize,
    field: impl Fn(&SVec, &Realization) -> T,
    r: &Realization,
    k: LatticeVec,
    samples: usize,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed ^ 0x5eed_5a3b_1e5f_0001);
    let shifted = r.shift(k);
    let ks = k.as_svec(dim);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let xs: Vec<f64> = (0..dim).map(|_| 5.0 * unit_interval(&mut rng) - 2.5).collect();
        let x = SVec::from_slice(&xs);
        worst = worst.max(field(&(x + ks), r).distance(&field(&x, &shifted)));
    }
    worst
}

/// (2N+1)^{-d} sum_{|k|_inf <= N} F(x, tau_k w).
pub fn ergodic_average(dim: usize, field: impl Fn(&SVec, &Realization) -> f64, r: &Realization, x: &SVec, n: usize) -> f64 {
    let cells = LatticeVec::cube(dim, n as i64);
    let total: f64 = cells.iter().map(|k| field(x, &r.shift(*k))).sum();
    total / cells.len() as f64
}

/// Uniform in [0, 1).
pub fn unit_interval(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
