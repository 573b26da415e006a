//! The `corrector`, `homogenize`, `sweep` and `validate` subcommands.

use crate::config::{LevelKind, RunConfig};
use crate::{CliError, SCHEMA_VERSION};
use serde::Serialize;
use serde_json::{json, Value};
use std::fs::File;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};
use stochhom::ensemble::{
    band_check, fmt_f64, lemma21_study, refinement_ratio, refinement_table, run_sweep_streaming, solver_for, wide_header,
    write_long_csv, write_wide_csv, EnsembleStats, Family, Lemma21Row, Order, RefinementRow,
};
use stochhom::fem::check_unit;
use stochhom::fields::{ergodic_average, stationarity_check, FieldValue, Realization};
use stochhom::mesh::LatticeVec;
use stochhom::model1::{
    solve_corrector_0, solve_corrector_1, solve_corrector_eta, supercell_space, unit_space, CorrectorSolution, HomogenizedReport,
};
use stochhom::model2::{a_per_family, lemma31_validate, solve_corrector_1_diffeo, solve_corrector_eta_diffeo};
use stochhom::small::{SMat, SVec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

impl Status {
    fn of(pass: bool) -> Status {
        if pass {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteVerdict {
    pub name: String,
    pub status: Status,
    pub detail: Value,
}

impl SuiteVerdict {
    fn new(name: &str, pass: bool, detail: Value) -> Self {
        SuiteVerdict { name: name.to_string(), status: Status::of(pass), detail }
    }

    fn skipped(name: &str, reason: &str) -> Self {
        SuiteVerdict { name: name.to_string(), status: Status::Skipped, detail: json!({ "reason": reason }) }
    }
}

/// Files written by one run, in order.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(cfg: &RunConfig) -> Result<Outputs, CliError> {
        std::fs::create_dir_all(&cfg.output_dir)
            .map_err(|e| CliError::Io(format!("output_dir {}: {e}", cfg.output_dir.display())))?;
        Ok(Outputs { dir: cfg.output_dir.clone(), files: Vec::new() })
    }

    fn file(&mut self, name: &str) -> Result<File, CliError> {
        self.files.push(name.to_string());
        let path = self.dir.join(name);
        File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    fn csv(&mut self, name: &str) -> Result<csv::Writer<File>, CliError> {
        Ok(csv::Writer::from_writer(self.file(name)?))
    }

    /// Writes the JSON summary; the timestamp is the only run-dependent field.
    fn summary(&mut self, name: &str, command: &str, cfg: &RunConfig, family: &Family, suites: &[SuiteVerdict], results: Value) -> Result<(), CliError> {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let files = self.files.clone();
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config": cfg,
            "config_toml": cfg.to_toml(),
            "family": family_info(family),
            "suites": suites,
            "results": results,
            "outputs": files,
            "timestamp_unix": timestamp,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        std::io::Write::write_all(&mut self.file(name)?, text.as_bytes())?;
        Ok(())
    }
}

fn family_info(family: &Family) -> Value {
    match family {
        Family::Model1(c) => json!({ "model": 1, "gamma": c.gamma, "coefficient_bound": c.bound, "a1_sup": c.a1_sup }),
        Family::Model2 { diffeo, .. } => json!({
            "model": 2,
            "nu": diffeo.nu,
            "m_prime": diffeo.m_prime,
            "eta0": diffeo.eta0,
            "identity": diffeo.is_identity(),
        }),
    }
}

fn rows(m: &SMat) -> Vec<Vec<f64>> {
    (0..m.dim).map(|i| m.m[i][..m.dim].to_vec()).collect()
}

fn build_family(cfg: &RunConfig) -> Result<Family, CliError> {
    cfg.check()?;
    Family::build(cfg.dim, &cfg.family).map_err(|e| CliError::model("family", e))
}

fn check_eta(family: &Family, field: &str, eta: f64) -> Result<(), CliError> {
    family.check_eta(eta).map_err(|e| CliError::model(field, e))
}

/// Solves one corrector and writes its values, element gradients and metadata.
pub fn corrector(mut cfg: RunConfig, dump_mesh: bool) -> Result<(), CliError> {
    cfg.resolve_point();
    let family = build_family(&cfg)?;
    let pt = cfg.point.clone();
    let (eta, seed, level) = (pt.eta.unwrap(), pt.seed.unwrap(), pt.level.unwrap());
    let (n, s) = (pt.truncation.unwrap(), pt.subdivisions.unwrap());
    let p = SVec::from_slice(pt.direction.as_deref().unwrap());
    check_unit(&p).map_err(|e| CliError::Config(format!("point.direction: {e}")))?;
    if level == LevelKind::Eta {
        check_eta(&family, "point.eta", eta)?;
    }
    let r = Realization::new(seed);
    let dim = cfg.dim;
    let fail = |e| CliError::model("corrector", e);
    let per = match &family {
        Family::Model1(c) => c.clone(),
        Family::Model2 { diffeo, .. } => a_per_family(diffeo).map_err(fail)?,
    };
    let unit = unit_space(dim, s).map_err(fail)?;
    let space = match level {
        LevelKind::Zero => unit_space(dim, s).map_err(fail)?,
        _ => supercell_space(dim, n, s).map_err(fail)?,
    };
    let sol: CorrectorSolution = match level {
        LevelKind::Eta => {
            let opts = solver_for(eta, &cfg.solver);
            match &family {
                Family::Model1(c) => solve_corrector_eta(c, &r, eta, &space, &p, &opts),
                Family::Model2 { diffeo, .. } => solve_corrector_eta_diffeo(diffeo, &r, eta, &space, &p, &opts),
            }
        }
        LevelKind::Zero => solve_corrector_0(&per, &unit, &p, &cfg.solver),
        LevelKind::One => solve_corrector_0(&per, &unit, &p, &cfg.solver).and_then(|w0| match &family {
            Family::Model1(c) => solve_corrector_1(c, &r, &space, &w0, &cfg.solver),
            Family::Model2 { diffeo, sign, .. } => solve_corrector_1_diffeo(diffeo, &r, &space, &w0, *sign, &cfg.solver),
        }),
    }
    .map_err(fail)?;

    let mut out = Outputs::create(&cfg)?;
    let mut w = out.csv("corrector_values.csv")?;
    w.write_record(["dof", "value"])?;
    for (i, v) in sol.field.values.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f64(*v)])?;
    }
    w.flush()?;
    let mut w = out.csv("corrector_gradients.csv")?;
    let mut header = vec!["element".to_string()];
    header.extend((1..=dim).map(|a| format!("x_{a}")));
    header.extend((1..=dim).map(|a| format!("grad_{a}")));
    w.write_record(&header)?;
    for (e, g) in sol.gradients.iter().enumerate() {
        let x = space.mesh.barycenter(e);
        let mut rec = vec![e.to_string()];
        rec.extend(x.as_slice().iter().map(|v| fmt_f64(*v)));
        rec.extend(g.as_slice().iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    if dump_mesh {
        let text = serde_json::to_string(&space.mesh.dump()).map_err(|e| CliError::Io(e.to_string()))?;
        std::io::Write::write_all(&mut out.file("mesh.json")?, text.as_bytes())?;
    }
    let grad_l2 = space.grad_l2_norm(&sol.gradients).map_err(|e| CliError::Solver(e.to_string()))?;
    let results = json!({
        "level": level,
        "eta": eta,
        "seed": seed,
        "direction": p.as_slice(),
        "truncation": if level == LevelKind::Zero { 0 } else { n },
        "subdivisions": s,
        "n_dofs": space.n_dofs(),
        "n_elements": space.n_elements(),
        "iterations": sol.iterations,
        "relative_residual": sol.relative_residual,
        "mean": sol.field.mean,
        "gradient_l2": grad_l2,
    });
    out.summary("corrector.json", "corrector", &cfg, &family, &[], results)
}

fn report_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["model", "eta", "h", "truncation", "seed"].iter().map(|s| s.to_string()).collect();
    for q in ["a_eta_star", "a_per_star", "a1_star", "residual_matrix"] {
        for i in 1..=dim {
            for j in 1..=dim {
                h.push(format!("{q}_{i}{j}"));
            }
        }
    }
    h.extend(["residual_max", "residual_frobenius", "z_norm_max", "v_norm_max"].iter().map(|s| s.to_string()));
    h
}

fn report_matrices(r: &HomogenizedReport) -> [(&'static str, &SMat); 4] {
    [("a_eta_star", &r.a_eta_star), ("a_per_star", &r.a_per_star), ("a1_star", &r.a1_star), ("residual_matrix", &r.residual_matrix)]
}

/// Computes the three homogenized matrices and the residual report for one realization.
pub fn homogenize(mut cfg: RunConfig) -> Result<(), CliError> {
    cfg.resolve_point();
    let family = build_family(&cfg)?;
    let pt = cfg.point.clone();
    let (eta, seed) = (pt.eta.unwrap(), pt.seed.unwrap());
    let (n, s) = (pt.truncation.unwrap(), pt.subdivisions.unwrap());
    if eta == 0.0 {
        return Err(CliError::Config("point.eta: the residual report needs eta != 0".into()));
    }
    check_eta(&family, "point.eta", eta)?;
    let fail = |e| CliError::model("homogenize", e);
    let r = Realization::new(seed);
    let pipe = family.pipeline(n, s, &cfg.solver).map_err(fail)?;
    let first = pipe.first_order(&r, &cfg.solver).map_err(fail)?;
    let report = pipe.report(&r, eta, &first, &solver_for(eta, &cfg.solver)).map_err(fail)?;

    let mut out = Outputs::create(&cfg)?;
    let mut w = out.csv("homogenized_report.csv")?;
    w.write_record(report_header(cfg.dim))?;
    let mut rec = vec![report.model.to_string(), fmt_f64(report.eta), fmt_f64(report.h), report.truncation.to_string(), report.seed.to_string()];
    for (_, m) in report_matrices(&report) {
        rec.extend(m.entries().into_iter().map(fmt_f64));
    }
    rec.extend([report.residual_max, report.residual_frobenius, report.z_norm_max, report.v_norm_max].map(fmt_f64));
    w.write_record(&rec)?;
    w.flush()?;
    let mut w = out.csv("homogenized_long.csv")?;
    w.write_record(["quantity", "i", "j", "value"])?;
    for (name, m) in report_matrices(&report) {
        for i in 0..cfg.dim {
            for j in 0..cfg.dim {
                w.write_record([name.to_string(), (i + 1).to_string(), (j + 1).to_string(), fmt_f64(m.m[i][j])])?;
            }
        }
    }
    w.flush()?;
    let results = json!({
        "model": report.model,
        "eta": report.eta,
        "seed": report.seed,
        "truncation": report.truncation,
        "subdivisions": s,
        "h": report.h,
        "a_eta_star": rows(&report.a_eta_star),
        "a_per_star": rows(&report.a_per_star),
        "a1_star": rows(&report.a1_star),
        "residual_matrix": rows(&report.residual_matrix),
        "residual_max": report.residual_max,
        "residual_frobenius": report.residual_frobenius,
        "z_norm": report.z_norm,
        "z_norm_max": report.z_norm_max,
        "v_norm": report.v_norm,
        "v_norm_max": report.v_norm_max,
    });
    out.summary("homogenize.json", "homogenize", &cfg, &family, &[], results)
}

fn lemma21_verdict(cfg: &RunConfig, rows: &[Lemma21Row]) -> SuiteVerdict {
    let mut pass = true;
    let mut per_s = Vec::new();
    for &s in &cfg.grid.subdivisions {
        let level: Vec<&Lemma21Row> = rows.iter().filter(|r| r.subdivisions == s).collect();
        let (first, last) = (level[0], level[level.len() - 1]);
        let ratio = last.deviation.mean / first.deviation.mean;
        let ok = level.iter().all(|r| r.failures.is_empty())
            && last.deviation.mean < first.deviation.mean
            && ratio <= cfg.suites.lemma21_ratio;
        pass &= ok;
        per_s.push(json!({
            "subdivisions": s,
            "first_truncation": first.truncation,
            "last_truncation": last.truncation,
            "first_mean_deviation": first.deviation.mean,
            "last_mean_deviation": last.deviation.mean,
            "ratio": ratio,
            "pass": ok,
        }));
    }
    SuiteVerdict::new("lemma21", pass, json!({ "required_ratio": cfg.suites.lemma21_ratio, "levels": per_s }))
}

fn refinement_verdict(cfg: &RunConfig, table: &[RefinementRow]) -> SuiteVerdict {
    let min = cfg.suites.refinement_min_order;
    let ok = |o: &Order| match o {
        Order::Exact => true,
        Order::Observed(p) => *p >= min,
        Order::Undetermined => false,
    };
    let pass = table.iter().all(|r| r.a_per_fit.iter().all(|f| ok(&f.order)));
    SuiteVerdict::new("refinement", pass, json!({ "min_order": min, "rows": table }))
}

/// Runs the Monte Carlo sweep and the studies enabled in the config.
///
/// CSV rows and the summary are written even when a suite fails or a solve
/// aborts part way.
pub fn sweep(cfg: RunConfig, workers: Option<usize>) -> Result<(), CliError> {
    let family = build_family(&cfg)?;
    let spec = cfg.sweep_spec();
    for &eta in &spec.etas {
        if eta == 0.0 {
            return Err(CliError::Config("grid.etas: eta = 0 has no residual".into()));
        }
        check_eta(&family, "grid.etas", eta)?;
    }
    if !(cfg.suites.band_factor >= 1.0) {
        return Err(CliError::Config(format!("suites.band_factor: must be >= 1, got {}", cfg.suites.band_factor)));
    }
    if cfg.suites.lemma21 {
        if family.model() != 1 {
            return Err(CliError::Config("suites.lemma21: needs a model1 family".into()));
        }
        if spec.truncations.len() < 2 {
            return Err(CliError::Config("suites.lemma21: needs at least two truncations".into()));
        }
    }
    let ratio = match cfg.suites.refinement {
        true => Some(refinement_ratio(&spec.subdivisions).map_err(|e| CliError::ensemble("suites.refinement", e))?),
        false => None,
    };

    let mut out = Outputs::create(&cfg)?;
    let mut rows: Vec<EnsembleStats> = Vec::new();
    let run = run_sweep_streaming(&spec, workers, |row| rows.push(row.clone()));
    write_wide_csv(cfg.dim, &rows, out.file("sweep_wide.csv")?).map_err(|e| CliError::Io(e.to_string()))?;
    write_long_csv(&rows, out.file("sweep_long.csv")?).map_err(|e| CliError::Io(e.to_string()))?;
    if let Err(e) = run {
        let err = CliError::ensemble("sweep", e);
        let partial = json!({ "rows": rows.len(), "aborted": err.to_string() });
        out.summary("summary.json", "sweep", &cfg, &family, &[], partial)?;
        return Err(err);
    }

    let mut suites = Vec::new();
    if cfg.suites.band {
        for (name, b) in [
            ("band_residual", band_check(&spec, &rows, "residual_max", |r| r.residual_max.max)),
            ("band_z_norm", band_check(&spec, &rows, "z_norm", |r| r.z_norm.max)),
        ] {
            suites.push(SuiteVerdict::new(name, b.pass, serde_json::to_value(&b).unwrap_or(Value::Null)));
        }
    } else {
        suites.push(SuiteVerdict::skipped("band_residual", "disabled"));
        suites.push(SuiteVerdict::skipped("band_z_norm", "disabled"));
    }
    let mut lemma21 = Value::Null;
    if cfg.suites.lemma21 {
        let study = lemma21_study(&spec, workers).map_err(|e| CliError::ensemble("suites.lemma21", e))?;
        let mut w = out.csv("lemma21.csv")?;
        w.write_record(["truncation", "subdivisions", "deviation_mean", "deviation_max", "deviation_se", "seeds_ok"])?;
        for r in &study {
            w.write_record([
                r.truncation.to_string(),
                r.subdivisions.to_string(),
                fmt_f64(r.deviation.mean),
                fmt_f64(r.deviation.max),
                fmt_f64(r.deviation.std_err),
                r.seeds_ok.to_string(),
            ])?;
        }
        w.flush()?;
        suites.push(lemma21_verdict(&cfg, &study));
        lemma21 = serde_json::to_value(&study).unwrap_or(Value::Null);
    } else {
        suites.push(SuiteVerdict::skipped("lemma21", "disabled"));
    }
    match ratio {
        Some(ratio) => suites.push(refinement_verdict(&cfg, &refinement_table(&spec, &rows, ratio))),
        None => suites.push(SuiteVerdict::skipped("refinement", "disabled")),
    }

    let results = json!({
        "rows": rows.len(),
        "failed_tasks": rows.iter().map(|r| r.failures.len()).sum::<usize>(),
        "wide_columns": wide_header(cfg.dim),
        "lemma21": lemma21,
    });
    out.summary("summary.json", "sweep", &cfg, &family, &suites, results)?;
    suite_outcome(&suites)
}

fn suite_outcome(suites: &[SuiteVerdict]) -> Result<(), CliError> {
    let failed: Vec<&str> = suites.iter().filter(|s| s.status == Status::Fail).map(|s| s.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Suite(format!("failed suites: {}", failed.join(", "))))
    }
}

struct Stationarity<'a> {
    dim: usize,
    r: &'a Realization,
    shifts: Vec<LatticeVec>,
    samples: usize,
    tolerance: f64,
    fields: Vec<Value>,
    pass: bool,
}

impl Stationarity<'_> {
    fn check<T: FieldValue>(&mut self, name: &str, field: impl Fn(&SVec, &Realization) -> T) {
        let discrepancy: Vec<f64> = self.shifts.iter().map(|k| stationarity_check(self.dim, &field, self.r, *k, self.samples)).collect();
        let worst = discrepancy.iter().cloned().fold(0.0, f64::max);
        let ok = worst <= self.tolerance;
        self.pass &= ok;
        self.fields.push(json!({ "field": name, "discrepancy": discrepancy, "max_discrepancy": worst, "pass": ok }));
    }
}

/// Scalar probe of the random field with its expectation and standard deviation at `x`.
type Probe = Box<dyn Fn(&SVec, &Realization) -> f64>;

fn ergodic_probe(family: &Family, x: &SVec) -> (&'static str, Probe, f64, f64) {
    let y = *x - LatticeVec::containing(x).as_svec(x.dim);
    match family {
        Family::Model1(c) => {
            let zero = vec![0.0; 2];
            let mean = c.a1_local(&zero).m[0][0];
            let spread = (c.a1_local(&[1.0, 0.0]).m[0][0] - mean).abs();
            let c = c.clone();
            ("a1_11", Box::new(move |x, r| c.a1(x, r).m[0][0]), mean, spread / 3f64.sqrt())
        }
        Family::Model2 { diffeo, .. } => {
            let slots = diffeo.slots();
            let zero = vec![0.0; slots];
            let mut one = zero.clone();
            one[0] = 1.0;
            let mean = diffeo.psi_local(&y, &zero).v[0];
            let spread = (diffeo.psi_local(&y, &one).v[0] - mean).abs();
            let d = diffeo.clone();
            ("psi_1", Box::new(move |x, r| d.psi(x, r).v[0]), mean, spread / 3f64.sqrt())
        }
    }
}

/// Field-level checks: diffeomorphism bounds, stationarity and ergodic averages.
pub fn validate(cfg: RunConfig) -> Result<(), CliError> {
    let family = build_family(&cfg)?;
    let v = &cfg.validate;
    let dim = cfg.dim;
    let r = Realization::new(cfg.seeds.base);
    let eta = cfg.grid.etas[0];
    let mut suites = Vec::new();

    match &family {
        Family::Model2 { diffeo, .. } => {
            let etas = if v.lemma31_etas.is_empty() { cfg.grid.etas.clone() } else { v.lemma31_etas.clone() };
            let rec = lemma31_validate(diffeo, &r, &etas, v.lemma31_samples);
            suites.push(SuiteVerdict::new("lemma31", rec.pass, serde_json::to_value(&rec).unwrap_or(Value::Null)));
        }
        Family::Model1(_) => suites.push(SuiteVerdict::skipped("lemma31", "model1 family has no diffeomorphism")),
    }

    let mut st = Stationarity {
        dim,
        r: &r,
        shifts: v.stationarity_shifts.iter().map(|k| LatticeVec::new(&k[..dim])).collect(),
        samples: v.stationarity_samples,
        tolerance: v.stationarity_tolerance,
        fields: Vec::new(),
        pass: true,
    };
    match &family {
        Family::Model1(c) => {
            st.check("a1", |x, r| c.a1(x, r));
            st.check("a_eta", |x, r| c.a_eta(x, r, eta));
            if v.inject_nonstationary {
                st.check("injected_nonstationary", |x, r| x.v[0] + c.a1(x, r).m[0][0]);
            }
        }
        Family::Model2 { diffeo, .. } => {
            st.check("psi", |x, r| diffeo.psi(x, r));
            st.check("grad_phi", |x, r| diffeo.grad_phi(x, r, eta));
            if v.inject_nonstationary {
                st.check("injected_nonstationary", |x, r| x.v[0] + diffeo.psi(x, r).v[0]);
            }
        }
    }
    let detail = json!({ "samples": st.samples, "tolerance": st.tolerance, "fields": st.fields });
    suites.push(SuiteVerdict::new("stationarity", st.pass, detail));

    let x = SVec::from_slice(&v.ergodic_point[..dim]);
    let (name, probe, mean, std) = ergodic_probe(&family, &x);
    let mut pass = true;
    let mut levels = Vec::new();
    for &n in &v.ergodic_truncations {
        let avg = ergodic_average(dim, &probe, &r, &x, n);
        let cells = ((2 * n + 1) as f64).powi(dim as i32);
        let bound = v.ergodic_sigmas * std / cells.sqrt() + 1e-12;
        let ok = (avg - mean).abs() <= bound;
        pass &= ok;
        levels.push(json!({ "truncation": n, "average": avg, "deviation": (avg - mean).abs(), "bound": bound, "pass": ok }));
    }
    let detail = json!({ "field": name, "point": x.as_slice(), "expectation": mean, "std": std, "levels": levels });
    suites.push(SuiteVerdict::new("ergodic", pass, detail));

    let mut out = Outputs::create(&cfg)?;
    out.summary("validate.json", "validate", &cfg, &family, &suites, Value::Null)?;
    suite_outcome(&suites)
}
