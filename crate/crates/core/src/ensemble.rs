//! Seeded Monte Carlo sweeps over (eta, N, s) grids.
//!
//! Work is split into one task per (N, s, seed); each task runs every eta so the
//! first-order correctors are shared. Results are merged in grid order, so the
//! tables do not depend on the number of workers or on completion order.

use crate::fem::SolverOptions;
use crate::fields::{Model1Coefficients, Model1Params, Model2Diffeomorphism, Model2Params, Realization};
use crate::model1::{CorrectorSolution, HomogenizedReport, Model1Pipeline, ModelError};
use crate::model2::{FirstOrderSign, Model2Pipeline, Normalization};
use crate::small::SMat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("could not build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which model and which coefficient family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FamilySpec {
    Model1 {
        coefficients: Model1Params,
    },
    Model2 {
        diffeomorphism: Model2Params,
        #[serde(default)]
        normalization: Normalization,
        #[serde(default)]
        sign: FirstOrderSign,
    },
}

/// Forces a solver failure for one (grid point, seed); used to test failure isolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub eta: f64,
    pub truncation: usize,
    pub subdivisions: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub dim: usize,
    pub family: FamilySpec,
    pub etas: Vec<f64>,
    pub truncations: Vec<usize>,
    pub subdivisions: Vec<usize>,
    pub seeds: usize,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Tolerance factor of the boundedness band.
    #[serde(default = "default_band")]
    pub band_factor: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fault_injection: Vec<FaultInjection>,
}

fn default_band() -> f64 {
    4.0
}

/// A validated family.
#[derive(Clone, Debug)]
pub enum Family {
    Model1(Model1Coefficients),
    Model2 { diffeo: Model2Diffeomorphism, normalization: Normalization, sign: FirstOrderSign },
}

impl Family {
    pub fn build(dim: usize, spec: &FamilySpec) -> Result<Family, ModelError> {
        Ok(match spec {
            FamilySpec::Model1 { coefficients } => Family::Model1(Model1Coefficients::new(dim, coefficients.clone())?),
            FamilySpec::Model2 { diffeomorphism, normalization, sign } => Family::Model2 {
                diffeo: Model2Diffeomorphism::new(dim, diffeomorphism.clone())?,
                normalization: *normalization,
                sign: *sign,
            },
        })
    }

    pub fn model(&self) -> u8 {
        match self {
            Family::Model1(_) => 1,
            Family::Model2 { .. } => 2,
        }
    }

    pub fn check_eta(&self, eta: f64) -> Result<(), ModelError> {
        match self {
            Family::Model1(c) => c.check_eta(eta)?,
            Family::Model2 { diffeo, .. } => diffeo.check_eta(eta)?,
        }
        Ok(())
    }

    pub fn pipeline(&self, truncation: usize, subdivisions: usize, opts: &SolverOptions) -> Result<Pipeline, ModelError> {
        Ok(match self {
            Family::Model1(c) => Pipeline::Model1(Model1Pipeline::new(c.clone(), truncation, subdivisions, opts)?),
            Family::Model2 { diffeo, normalization, sign } => Pipeline::Model2(
                Model2Pipeline::new(diffeo.clone(), *normalization, truncation, subdivisions, opts)?.with_sign(*sign),
            ),
        })
    }
}

/// Per-(N, s) cache of deterministic data.
pub enum Pipeline {
    Model1(Model1Pipeline),
    Model2(Model2Pipeline),
}

/// Realization-dependent first-order data.
pub enum FirstOrderData {
    Model1(crate::model1::FirstOrder),
    Model2(crate::model2::FirstOrderDiffeo),
}

impl FirstOrderData {
    pub fn a1_star(&self) -> SMat {
        match self {
            FirstOrderData::Model1(f) => f.a1_star,
            FirstOrderData::Model2(f) => f.a1_star,
        }
    }

    pub fn w1(&self) -> &[CorrectorSolution] {
        match self {
            FirstOrderData::Model1(f) => &f.w1,
            FirstOrderData::Model2(f) => &f.w1,
        }
    }
}

impl Pipeline {
    pub fn a_per_star(&self) -> SMat {
        match self {
            Pipeline::Model1(p) => p.a_per_star,
            Pipeline::Model2(p) => p.a_per_star,
        }
    }

    pub fn first_order(&self, r: &Realization, opts: &SolverOptions) -> Result<FirstOrderData, ModelError> {
        Ok(match self {
            Pipeline::Model1(p) => FirstOrderData::Model1(p.first_order(r, opts)?),
            Pipeline::Model2(p) => FirstOrderData::Model2(p.first_order(r, opts)?),
        })
    }

    pub fn correctors_eta(&self, r: &Realization, eta: f64, opts: &SolverOptions) -> Result<(Vec<CorrectorSolution>, SMat), ModelError> {
        match self {
            Pipeline::Model1(p) => p.correctors_eta(r, eta, opts),
            Pipeline::Model2(p) => p.correctors_eta(r, eta, opts),
        }
    }

    pub fn homogenized(&self, r: &Realization, eta: f64, opts: &SolverOptions) -> Result<SMat, ModelError> {
        Ok(self.correctors_eta(r, eta, opts)?.1)
    }

    /// Unit-cell correctors of the periodic problem.
    pub fn w0(&self) -> &[CorrectorSolution] {
        match self {
            Pipeline::Model1(p) => &p.w0,
            Pipeline::Model2(p) => &p.w0,
        }
    }

    pub fn space(&self) -> &crate::fem::P1Space {
        match self {
            Pipeline::Model1(p) => &p.space,
            Pipeline::Model2(p) => &p.space,
        }
    }

    pub fn report(&self, r: &Realization, eta: f64, first: &FirstOrderData, opts: &SolverOptions) -> Result<HomogenizedReport, ModelError> {
        match (self, first) {
            (Pipeline::Model1(p), FirstOrderData::Model1(f)) => p.report_with(r, eta, f, opts),
            (Pipeline::Model2(p), FirstOrderData::Model2(f)) => p.report_with(r, eta, f, opts),
            _ => Err(ModelError::MeshMismatch("first-order data from another model".into())),
        }
    }
}

/// Solver settings for one eta: tightened when eta^2 <= 1e-3.
pub fn solver_for(eta: f64, base: &SolverOptions) -> SolverOptions {
    if eta * eta <= 1e-3 {
        SolverOptions { rtol: base.rtol.min(1e-11), ..*base }
    } else {
        *base
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<Family, EnsembleError> {
        if self.etas.is_empty() || self.truncations.is_empty() || self.subdivisions.is_empty() {
            return Err(EnsembleError::InvalidSpec("eta, truncation and subdivision lists must be non-empty".into()));
        }
        if self.seeds == 0 {
            return Err(EnsembleError::InvalidSpec("seed count must be at least 1".into()));
        }
        if self.subdivisions.contains(&0) {
            return Err(EnsembleError::InvalidSpec("subdivisions must be >= 1".into()));
        }
        if !(self.solver.rtol > 0.0) || self.solver.max_iter_factor == 0 {
            return Err(EnsembleError::InvalidSpec("solver rtol and max_iter_factor must be positive".into()));
        }
        if !(self.band_factor >= 1.0) {
            return Err(EnsembleError::InvalidSpec(format!("band_factor must be >= 1, got {}", self.band_factor)));
        }
        let family = Family::build(self.dim, &self.family)?;
        for &eta in &self.etas {
            if eta == 0.0 {
                return Err(EnsembleError::Model(ModelError::ZeroEta));
            }
            family.check_eta(eta)?;
        }
        Ok(family)
    }

    pub fn seed(&self, i: usize) -> u64 {
        self.seed_base.wrapping_add(i as u64)
    }

    /// Grid points in output order: N, then s, then eta.
    pub fn grid(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for &n in &self.truncations {
            for &s in &self.subdivisions {
                for &eta in &self.etas {
                    out.push((n, s, eta));
                }
            }
        }
        out
    }

    /// Tightest solver used by any eta of the sweep; first-order solves use it.
    fn first_order_solver(&self) -> SolverOptions {
        self.etas.iter().fold(self.solver, |acc, &eta| {
            let o = solver_for(eta, &self.solver);
            if o.rtol < acc.rtol {
                o
            } else {
                acc
            }
        })
    }

    fn injected(&self, n: usize, s: usize, eta: f64, seed: u64) -> bool {
        self.fault_injection.iter().any(|f| f.truncation == n && f.subdivisions == s && f.eta == eta && f.seed == seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalarStats {
    pub mean: f64,
    pub max: f64,
    pub std_err: f64,
}

impl ScalarStats {
    pub fn of(xs: &[f64]) -> ScalarStats {
        if xs.is_empty() {
            return ScalarStats { mean: f64::NAN, max: f64::NAN, std_err: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let std_err = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        ScalarStats { mean, max, std_err }
    }
}

/// Componentwise statistics of a matrix-valued sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixStats {
    pub mean: SMat,
    pub max: SMat,
    pub std_err: SMat,
}

impl MatrixStats {
    pub fn of(dim: usize, ms: &[SMat]) -> MatrixStats {
        let mut out = MatrixStats { mean: SMat::zeros(dim), max: SMat::zeros(dim), std_err: SMat::zeros(dim) };
        for i in 0..dim {
            for j in 0..dim {
                let xs: Vec<f64> = ms.iter().map(|m| m.m[i][j]).collect();
                let s = ScalarStats::of(&xs);
                out.mean.m[i][j] = s.mean;
                out.max.m[i][j] = s.max;
                out.std_err.m[i][j] = s.std_err;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub message: String,
}

/// One row per (N, s, eta).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub model: u8,
    pub eta: f64,
    pub truncation: usize,
    pub subdivisions: usize,
    pub h: f64,
    pub seeds_ok: usize,
    pub failures: Vec<SeedFailure>,
    pub a_per_star: SMat,
    pub a_eta_star: MatrixStats,
    pub a1_star: MatrixStats,
    pub residual_matrix: MatrixStats,
    pub residual_max: ScalarStats,
    pub residual_frobenius: ScalarStats,
    pub z_norm: ScalarStats,
    pub v_norm: ScalarStats,
}

/// Outcome of one (seed, eta) task.
type SeedResult = Result<HomogenizedReport, SeedFailure>;

fn summarize(dim: usize, model: u8, n: usize, s: usize, eta: f64, a_per_star: SMat, results: &[SeedResult]) -> EnsembleStats {
    let ok: Vec<&HomogenizedReport> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failures: Vec<SeedFailure> = results.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    let mats = |f: &dyn Fn(&HomogenizedReport) -> SMat| -> Vec<SMat> { ok.iter().map(|r| f(r)).collect() };
    let scal = |f: &dyn Fn(&HomogenizedReport) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
    EnsembleStats {
        model,
        eta,
        truncation: n,
        subdivisions: s,
        h: 1.0 / s as f64,
        seeds_ok: ok.len(),
        failures,
        a_per_star,
        a_eta_star: MatrixStats::of(dim, &mats(&|r| r.a_eta_star)),
        a1_star: MatrixStats::of(dim, &mats(&|r| r.a1_star)),
        residual_matrix: MatrixStats::of(dim, &mats(&|r| r.residual_matrix)),
        residual_max: ScalarStats::of(&scal(&|r| r.residual_max)),
        residual_frobenius: ScalarStats::of(&scal(&|r| r.residual_frobenius)),
        z_norm: ScalarStats::of(&scal(&|r| r.z_norm_max)),
        v_norm: ScalarStats::of(&scal(&|r| r.v_norm_max)),
    }
}

/// Runs `f` on a pool with the given worker count, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, EnsembleError> {
    match workers {
        None => Ok(f()),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build().map_err(|e| EnsembleError::Pool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Per-seed reports of one (N, s) block, indexed [seed][eta].
fn run_block(spec: &SweepSpec, pipe: &Pipeline, n: usize, s: usize) -> Vec<Vec<SeedResult>> {
    let first_opts = spec.first_order_solver();
    (0..spec.seeds)
        .into_par_iter()
        .map(|i| {
            let seed = spec.seed(i);
            let r = Realization::new(seed);
            let first = pipe.first_order(&r, &first_opts);
            spec.etas
                .iter()
                .map(|&eta| {
                    let fail = |message: String| SeedFailure { seed, message };
                    if spec.injected(n, s, eta, seed) {
                        return Err(fail("injected solver failure".into()));
                    }
                    let first = first.as_ref().map_err(|e| fail(e.to_string()))?;
                    pipe.report(&r, eta, first, &solver_for(eta, &spec.solver)).map_err(|e| fail(e.to_string()))
                })
                .collect()
        })
        .collect()
}

/// Runs the sweep; `on_row` sees rows in grid order as each (N, s) block completes.
pub fn run_sweep_streaming(
    spec: &SweepSpec,
    workers: Option<usize>,
    mut on_row: impl FnMut(&EnsembleStats) + Send,
) -> Result<Vec<EnsembleStats>, EnsembleError> {
    let family = spec.validate()?;
    with_workers(workers, move || {
        let mut rows = Vec::new();
        for &n in &spec.truncations {
            for &s in &spec.subdivisions {
                let pipe = family.pipeline(n, s, &spec.solver)?;
                let block = run_block(spec, &pipe, n, s);
                for (k, &eta) in spec.etas.iter().enumerate() {
                    let results: Vec<SeedResult> = block.iter().map(|per_seed| per_seed[k].clone()).collect();
                    let row = summarize(spec.dim, family.model(), n, s, eta, pipe.a_per_star(), &results);
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
        Ok(rows)
    })?
}

pub fn run_sweep(spec: &SweepSpec, workers: Option<usize>) -> Result<Vec<EnsembleStats>, EnsembleError> {
    run_sweep_streaming(spec, workers, |_| {})
}

/// Boundedness band of a sweep: global sup proxy over the value at the reference point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandCheck {
    pub quantity: String,
    /// (eta, N, s) of the reference row: first entries of the grid lists.
    pub reference: (f64, usize, usize),
    pub reference_value: f64,
    pub global_max: f64,
    pub ratio: f64,
    pub factor: f64,
    pub pass: bool,
}

/// Absolute floor of the band reference value.
pub const BAND_FLOOR: f64 = 1e-9;

/// Checks max over all rows of the per-row max-over-seeds against `factor` times the reference row.
pub fn band_check(spec: &SweepSpec, rows: &[EnsembleStats], quantity: &str, value: impl Fn(&EnsembleStats) -> f64) -> BandCheck {
    let reference = (spec.etas[0], spec.truncations[0], spec.subdivisions[0]);
    let ref_row = rows.iter().find(|r| (r.eta, r.truncation, r.subdivisions) == reference);
    let reference_value = ref_row.map(&value).unwrap_or(f64::NAN);
    let any_failed = rows.iter().any(|r| !r.failures.is_empty());
    let global_max = rows.iter().map(&value).fold(f64::NEG_INFINITY, f64::max);
    // Values below the floor are roundoff, e.g. when A_1 = 0.
    let denom = reference_value.max(BAND_FLOOR);
    let ratio = global_max / denom;
    let pass = !any_failed && global_max.is_finite() && global_max <= spec.band_factor * denom;
    BandCheck { quantity: quantity.to_string(), reference, reference_value, global_max, ratio, factor: spec.band_factor, pass }
}

/// One row of the first-order limit study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma21Row {
    pub truncation: usize,
    pub subdivisions: usize,
    pub limit: SMat,
    /// |A1*^{h,N}(omega) - A1*| in max norm, over seeds.
    pub deviation: ScalarStats,
    pub seeds_ok: usize,
    pub failures: Vec<SeedFailure>,
}

/// Deviation of A1*^{h,N} from its deterministic limit, per (N, s).
pub fn lemma21_study(spec: &SweepSpec, workers: Option<usize>) -> Result<Vec<Lemma21Row>, EnsembleError> {
    let family = spec.validate()?;
    let Family::Model1(coeffs) = family else {
        return Err(EnsembleError::InvalidSpec("the first-order limit study needs a Model-1 family".into()));
    };
    with_workers(workers, move || {
        let mut rows = Vec::new();
        for &n in &spec.truncations {
            for &s in &spec.subdivisions {
                let pipe = Model1Pipeline::new(coeffs.clone(), n, s, &spec.solver)?;
                let limit = pipe.lemma21_limit()?;
                let results: Vec<Result<f64, SeedFailure>> = (0..spec.seeds)
                    .into_par_iter()
                    .map(|i| {
                        let seed = spec.seed(i);
                        pipe.first_order(&Realization::new(seed), &spec.solver)
                            .map(|f| (f.a1_star - limit).max_abs())
                            .map_err(|e| SeedFailure { seed, message: e.to_string() })
                    })
                    .collect();
                let ok: Vec<f64> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
                rows.push(Lemma21Row {
                    truncation: n,
                    subdivisions: s,
                    limit,
                    deviation: ScalarStats::of(&ok),
                    seeds_ok: ok.len(),
                    failures: results.into_iter().filter_map(|r| r.err()).collect(),
                });
            }
        }
        Ok(rows)
    })?
}

/// Observed convergence order of a refinement sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Order {
    /// No h-dependence up to rounding.
    Exact,
    Observed(f64),
    /// Differences do not shrink monotonically.
    Undetermined,
}

impl Serialize for Order {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Order::Exact => s.serialize_str("exact"),
            Order::Observed(p) => s.serialize_f64(*p),
            Order::Undetermined => s.serialize_str("undetermined"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RichardsonFit {
    pub finest: f64,
    pub extrapolated: f64,
    pub order: Order,
}

/// Richardson fit from the last three values of a sequence with mesh ratio `ratio`.
pub fn richardson(values: &[f64], ratio: f64) -> RichardsonFit {
    let n = values.len();
    assert!(n >= 3, "need three refinement levels");
    let (f1, f2, f3) = (values[n - 3], values[n - 2], values[n - 1]);
    let scale = f1.abs().max(f2.abs()).max(f3.abs()).max(1.0);
    let (d1, d2) = (f2 - f1, f3 - f2);
    if d1.abs() <= 1e-12 * scale && d2.abs() <= 1e-12 * scale {
        return RichardsonFit { finest: f3, extrapolated: f3, order: Order::Exact };
    }
    if d2 == 0.0 || d1 == 0.0 || d1.signum() != d2.signum() || d2.abs() >= d1.abs() {
        return RichardsonFit { finest: f3, extrapolated: f3, order: Order::Undetermined };
    }
    let p = (d1 / d2).ln() / ratio.ln();
    let extrapolated = f3 + d2 / (ratio.powf(p) - 1.0);
    RichardsonFit { finest: f3, extrapolated, order: Order::Observed(p) }
}

/// Richardson fits per (N, eta) of A*_per^h entries and of the mean residual norm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RefinementRow {
    pub eta: f64,
    pub truncation: usize,
    pub subdivisions: Vec<usize>,
    pub a_per_star: Vec<SMat>,
    /// Row-major fits of the A*_per^h entries.
    pub a_per_fit: Vec<RichardsonFit>,
    pub residual_mean: Vec<f64>,
    pub residual_fit: RichardsonFit,
}

pub fn refinement_ratio(subdivisions: &[usize]) -> Result<f64, EnsembleError> {
    if subdivisions.len() < 3 {
        return Err(EnsembleError::InvalidSpec("h-refinement needs at least three subdivision levels".into()));
    }
    let r = subdivisions[1] as f64 / subdivisions[0] as f64;
    let geometric = r > 1.0 && subdivisions.windows(2).all(|w| w[1] as f64 == w[0] as f64 * r);
    if !geometric {
        return Err(EnsembleError::InvalidSpec(format!("subdivisions {subdivisions:?} are not a geometric progression")));
    }
    Ok(r)
}

pub fn h_refinement_study(spec: &SweepSpec, workers: Option<usize>) -> Result<Vec<RefinementRow>, EnsembleError> {
    let ratio = refinement_ratio(&spec.subdivisions)?;
    let rows = run_sweep(spec, workers)?;
    Ok(refinement_table(spec, &rows, ratio))
}

/// Builds the Richardson table from finished sweep rows.
pub fn refinement_table(spec: &SweepSpec, rows: &[EnsembleStats], ratio: f64) -> Vec<RefinementRow> {
    let mut out = Vec::new();
    for &n in &spec.truncations {
        for &eta in &spec.etas {
            let level: Vec<&EnsembleStats> = spec
                .subdivisions
                .iter()
                .filter_map(|&s| rows.iter().find(|r| r.truncation == n && r.subdivisions == s && r.eta == eta))
                .collect();
            let a_per_star: Vec<SMat> = level.iter().map(|r| r.a_per_star).collect();
            let dim = spec.dim;
            let mut a_per_fit = Vec::new();
            for i in 0..dim {
                for j in 0..dim {
                    let vals: Vec<f64> = a_per_star.iter().map(|m| m.m[i][j]).collect();
                    a_per_fit.push(richardson(&vals, ratio));
                }
            }
            let residual_mean: Vec<f64> = level.iter().map(|r| r.residual_max.mean).collect();
            out.push(RefinementRow {
                eta,
                truncation: n,
                subdivisions: spec.subdivisions.clone(),
                a_per_star,
                a_per_fit,
                residual_fit: richardson(&residual_mean, ratio),
                residual_mean,
            });
        }
    }
    out
}

/// Full-precision float text: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn matrix_columns(name: &str, dim: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..dim {
        for j in 0..dim {
            out.push(format!("{name}_{}{}", i + 1, j + 1));
        }
    }
    out
}

fn matrix_values(m: &SMat) -> Vec<String> {
    m.entries().into_iter().map(fmt_f64).collect()
}

/// Column names of the wide table, one row per grid point.
pub fn wide_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["model", "eta", "truncation", "subdivisions", "h", "seeds_ok", "failed_seeds"].iter().map(|s| s.to_string()).collect();
    h.extend(matrix_columns("a_per_star", dim));
    for q in ["a_eta_star", "a1_star", "residual_matrix"] {
        for stat in ["mean", "max", "se"] {
            h.extend(matrix_columns(&format!("{q}_{stat}"), dim));
        }
    }
    for q in ["residual_max", "residual_frobenius", "z_norm", "v_norm"] {
        for stat in ["mean", "max", "se"] {
            h.push(format!("{q}_{stat}"));
        }
    }
    h
}

pub fn wide_record(row: &EnsembleStats) -> Vec<String> {
    let failed: Vec<String> = row.failures.iter().map(|f| f.seed.to_string()).collect();
    let mut rec = vec![
        row.model.to_string(),
        fmt_f64(row.eta),
        row.truncation.to_string(),
        row.subdivisions.to_string(),
        fmt_f64(row.h),
        row.seeds_ok.to_string(),
        failed.join(";"),
    ];
    rec.extend(matrix_values(&row.a_per_star));
    for m in [&row.a_eta_star, &row.a1_star, &row.residual_matrix] {
        rec.extend(matrix_values(&m.mean));
        rec.extend(matrix_values(&m.max));
        rec.extend(matrix_values(&m.std_err));
    }
    for s in [&row.residual_max, &row.residual_frobenius, &row.z_norm, &row.v_norm] {
        rec.extend([fmt_f64(s.mean), fmt_f64(s.max), fmt_f64(s.std_err)]);
    }
    rec
}

pub fn write_wide_csv<W: Write>(dim: usize, rows: &[EnsembleStats], out: W) -> Result<(), EnsembleError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(wide_header(dim))?;
    for row in rows {
        w.write_record(wide_record(row))?;
    }
    w.flush()?;
    Ok(())
}

pub const LONG_HEADER: [&str; 10] = ["model", "eta", "truncation", "subdivisions", "quantity", "i", "j", "mean", "max", "se"];

/// Long format: one line per grid point, quantity and matrix component.
pub fn write_long_csv<W: Write>(rows: &[EnsembleStats], out: W) -> Result<(), EnsembleError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LONG_HEADER)?;
    for row in rows {
        let key = [row.model.to_string(), fmt_f64(row.eta), row.truncation.to_string(), row.subdivisions.to_string()];
        let dim = row.a_per_star.dim;
        let mut emit = |q: &str, i: usize, j: usize, mean: f64, max: f64, se: f64| -> Result<(), csv::Error> {
            let mut rec: Vec<String> = key.to_vec();
            rec.extend([q.to_string(), i.to_string(), j.to_string(), fmt_f64(mean), fmt_f64(max), fmt_f64(se)]);
            w.write_record(rec)
        };
        for i in 0..dim {
            for j in 0..dim {
                let v = row.a_per_star.m[i][j];
                emit("a_per_star", i + 1, j + 1, v, v, 0.0)?;
            }
        }
        for (q, m) in [("a_eta_star", &row.a_eta_star), ("a1_star", &row.a1_star), ("residual_matrix", &row.residual_matrix)] {
            for i in 0..dim {
                for j in 0..dim {
                    emit(q, i + 1, j + 1, m.mean.m[i][j], m.max.m[i][j], m.std_err.m[i][j])?;
                }
            }
        }
        for (q, s) in [("residual_max", &row.residual_max), ("residual_frobenius", &row.residual_frobenius), ("z_norm", &row.z_norm), ("v_norm", &row.v_norm)] {
            emit(q, 0, 0, s.mean, s.max, s.std_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Version of the CSV and JSON layouts.
pub const SCHEMA_VERSION: u32 = 1;
