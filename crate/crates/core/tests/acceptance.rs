//! Acceptance gate: one line per criterion, non-zero exit if any fails.

use std::time::{Duration, Instant};
use stochhom::ensemble::{
    band_check, lemma21_study, refinement_ratio, refinement_table, run_sweep, write_long_csv, write_wide_csv, FamilySpec, Order,
    SweepSpec,
};
use stochhom::fem::SolverOptions;
use stochhom::fields::{Model1Coefficients, Model1Params, Model2Diffeomorphism, Model2Params, PeriodicProfile, Realization, Remainder};
use stochhom::model1::{element_a_eta, homogenized_eta, solve_correctors_eta, supercell_space, Model1Pipeline};
use stochhom::model2::{lemma31_validate, FirstOrderSign, Model2Pipeline, Normalization};
use stochhom::small::SMat;

struct Outcome {
    pass: bool,
    detail: String,
}

fn checkerboard() -> PeriodicProfile {
    PeriodicProfile::Checkerboard { low: 1.0, high: 4.0 }
}

fn laminate() -> PeriodicProfile {
    PeriodicProfile::Laminate { low: 1.0, high: 4.0 }
}

fn m1(profile: PeriodicProfile, b: f64, m: f64, remainder: Remainder) -> Model1Params {
    Model1Params { profile, amplitude: b, mean_shift: m, remainder, eta_max: 1.0 }
}

fn m2(profile: PeriodicProfile, c: f64, t: f64, m: f64, eta_max: f64) -> Model2Params {
    Model2Params { profile, amplitude: c, theta_amplitude: t, psi_mean: m, eta_max }
}

fn tight() -> SolverOptions {
    SolverOptions { rtol: 1e-12, ..Default::default() }
}

fn constant_exactness() -> Outcome {
    let c = Model1Coefficients::new(2, m1(PeriodicProfile::Constant { diag: vec![2.0, 3.0] }, 0.0, 0.0, Remainder::None)).unwrap();
    let target = SMat::diag(&[2.0, 3.0]);
    let mut err = 0.0f64;
    for n in [0, 1, 2] {
        for s in [2, 4] {
            let pipe = Model1Pipeline::new(c.clone(), n, s, &tight()).unwrap();
            err = err.max((pipe.a_per_star - target).max_abs());
            let r = Realization::new(7);
            let first = pipe.first_order(&r, &tight()).unwrap();
            let (w, a) = pipe.correctors_eta(&r, 0.5, &tight()).unwrap();
            err = err.max((a - target).max_abs());
            for sol in pipe.w0.iter().chain(&w).chain(&first.w1) {
                err = err.max(sol.field.values.iter().fold(0.0, |m, x| m.max(x.abs())));
            }
        }
    }
    Outcome { pass: err <= 1e-10, detail: format!("max error {err:.2e}") }
}

fn harmonic_mean_1d() -> Outcome {
    let c = Model1Coefficients::new(1, m1(PeriodicProfile::TwoPhase { low: 1.0, high: 4.0 }, 0.2, 0.0, Remainder::None)).unwrap();
    let pipe = Model1Pipeline::new(c.clone(), 2, 4, &tight()).unwrap();
    let per_err = (pipe.a_per_star.m[0][0] - 1.6).abs();
    let mut real_err = 0.0f64;
    for seed in 0..20 {
        let r = Realization::new(seed);
        let (_, a) = pipe.correctors_eta(&r, 0.1, &tight()).unwrap();
        let coeff = element_a_eta(&c, &r, 0.1, &pipe.space);
        let oracle = pipe.space.volume() / pipe.space.integrate(0.0, |e| 1.0 / coeff[e].m[0][0]);
        real_err = real_err.max((a.m[0][0] - oracle).abs());
    }
    Outcome {
        pass: per_err <= 1e-9 && real_err <= 1e-9,
        detail: format!("periodic error {per_err:.2e}, realized error over 20 seeds {real_err:.2e}"),
    }
}

fn laminate_refinement() -> Outcome {
    let spec = SweepSpec {
        dim: 2,
        family: FamilySpec::Model1 { coefficients: m1(laminate(), 0.0, 0.0, Remainder::None) },
        etas: vec![0.1],
        truncations: vec![0],
        subdivisions: vec![4, 8, 16],
        seeds: 1,
        seed_base: 0,
        solver: tight(),
        band_factor: 4.0,
        fault_injection: vec![],
    };
    let ratio = refinement_ratio(&spec.subdivisions).unwrap();
    let rows = run_sweep(&spec, None).unwrap();
    let table = refinement_table(&spec, &rows, ratio);
    let target = [1.6, 0.0, 0.0, 2.5];
    let fits = &table[0].a_per_fit;
    let err = fits.iter().zip(target).map(|(f, t)| (f.extrapolated - t).abs()).fold(0.0, f64::max);
    let orders: Vec<String> = fits
        .iter()
        .map(|f| match f.order {
            Order::Exact => "exact".to_string(),
            Order::Observed(p) => format!("{p:.2}"),
            Order::Undetermined => "undetermined".to_string(),
        })
        .collect();
    Outcome { pass: err <= 1e-3, detail: format!("extrapolated error {err:.2e}, orders [{}]", orders.join(", ")) }
}

fn band_outcome(spec: &SweepSpec) -> Outcome {
    let rows = run_sweep(spec, None).unwrap();
    let res = band_check(spec, &rows, "residual_max", |r| r.residual_max.max);
    let z = band_check(spec, &rows, "z_norm", |r| r.z_norm.max);
    let failures: usize = rows.iter().map(|r| r.failures.len()).sum();
    Outcome {
        pass: res.pass && z.pass,
        detail: format!(
            "residual max {:.3e} / ref {:.3e} = {:.2}, z_norm max {:.3e} / ref {:.3e} = {:.2}, {} rows, {failures} failed solves",
            res.global_max, res.reference_value, res.ratio, z.global_max, z.reference_value, z.ratio, rows.len()
        ),
    }
}

fn model1_sweep() -> Outcome {
    band_outcome(&SweepSpec {
        dim: 2,
        family: FamilySpec::Model1 { coefficients: m1(checkerboard(), 0.3, 0.0, Remainder::Quadratic) },
        etas: vec![0.2, 0.1, 0.05, 0.025],
        truncations: vec![1, 2, 4],
        subdivisions: vec![4, 8],
        seeds: 50,
        seed_base: 1000,
        solver: SolverOptions::default(),
        band_factor: 4.0,
        fault_injection: vec![],
    })
}

fn first_derivative() -> Outcome {
    let eta = 0.05;
    let seeds = 10;
    let m1_pipe = Model1Pipeline::new(
        Model1Coefficients::new(2, m1(checkerboard(), 0.3, 1.0, Remainder::None)).unwrap(),
        1,
        4,
        &tight(),
    )
    .unwrap();
    let m2_pipe = Model2Pipeline::new(
        Model2Diffeomorphism::new(2, m2(laminate(), 0.2, 0.0, 0.5, 0.1)).unwrap(),
        Normalization::VolumeNormalized,
        1,
        4,
        &tight(),
    )
    .unwrap();
    let mut worst = [0.0f64; 2];
    for seed in 0..seeds {
        let r = Realization::new(500 + seed);
        let f = m1_pipe.first_order(&r, &tight()).unwrap();
        let cd = (m1_pipe.correctors_eta(&r, eta, &tight()).unwrap().1 - m1_pipe.correctors_eta(&r, -eta, &tight()).unwrap().1).scale(0.5 / eta);
        worst[0] = worst[0].max((cd - f.a1_star).frobenius() / f.a1_star.frobenius());
        let f = m2_pipe.first_order(&r, &tight()).unwrap();
        let cd = (m2_pipe.correctors_eta(&r, eta, &tight()).unwrap().1 - m2_pipe.correctors_eta(&r, -eta, &tight()).unwrap().1).scale(0.5 / eta);
        worst[1] = worst[1].max((cd - f.a1_star).frobenius() / f.a1_star.frobenius());
    }
    let bound = 0.05 * eta;
    Outcome {
        pass: worst[0] <= bound && worst[1] <= bound,
        detail: format!("worst relative error over {seeds} seeds: model 1 {:.2e}, model 2 {:.2e} (bound {bound:.1e})", worst[0], worst[1]),
    }
}

fn lemma21() -> Outcome {
    let spec = SweepSpec {
        dim: 2,
        family: FamilySpec::Model1 { coefficients: m1(checkerboard(), 0.3, 1.0, Remainder::None) },
        etas: vec![0.1],
        truncations: vec![1, 2, 4],
        subdivisions: vec![4],
        seeds: 100,
        seed_base: 2000,
        solver: SolverOptions::default(),
        band_factor: 4.0,
        fault_injection: vec![],
    };
    let rows = lemma21_study(&spec, None).unwrap();
    let m: Vec<f64> = rows.iter().map(|r| r.deviation.mean).collect();
    let decreasing = m.windows(2).all(|w| w[1] < w[0]);
    let ratio = m[2] / m[0];
    Outcome {
        pass: decreasing && ratio <= 0.5,
        detail: format!("mean deviation N=1 {:.3e}, N=2 {:.3e}, N=4 {:.3e}, N=4/N=1 = {ratio:.3}", m[0], m[1], m[2]),
    }
}

fn lemma31() -> Outcome {
    let d = Model2Diffeomorphism::new(2, m2(checkerboard(), 0.1, 0.1, 0.0, 0.1)).unwrap();
    let rec = lemma31_validate(&d, &Realization::new(77), &[0.1, 0.05], 10_000);
    let eig_min = rec.levels.iter().map(|l| l.eig_min).fold(f64::INFINITY, f64::min);
    let eig_max = rec.levels.iter().map(|l| l.eig_max).fold(0.0, f64::max);
    Outcome {
        pass: rec.pass,
        detail: format!(
            "eigenvalues in [{eig_min:.4}, {eig_max:.4}], Gamma band {:.3}, sigma band {:.3}",
            rec.gamma_band, rec.sigma_band
        ),
    }
}

fn identity_reduction() -> Outcome {
    let base = SweepSpec {
        dim: 2,
        family: FamilySpec::Model1 { coefficients: m1(checkerboard(), 0.0, 0.0, Remainder::None) },
        etas: vec![0.2, 0.1, 0.05],
        truncations: vec![1],
        subdivisions: vec![4],
        seeds: 5,
        seed_base: 300,
        solver: tight(),
        band_factor: 4.0,
        fault_injection: vec![],
    };
    let diffeo = SweepSpec {
        family: FamilySpec::Model2 {
            diffeomorphism: m2(checkerboard(), 0.0, 0.0, 0.0, 0.2),
            normalization: Normalization::VolumeNormalized,
            sign: FirstOrderSign::Derived,
        },
        ..base.clone()
    };
    let a = run_sweep(&base, None).unwrap();
    let b = run_sweep(&diffeo, None).unwrap();
    let mut err = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in [
            (x.a_per_star, y.a_per_star),
            (x.a_eta_star.mean, y.a_eta_star.mean),
            (x.a_eta_star.max, y.a_eta_star.max),
            (x.a1_star.max, y.a1_star.max),
            (x.residual_matrix.max, y.residual_matrix.max),
        ] {
            err = err.max((p - q).max_abs());
        }
    }
    // Per-seed check at the matrix level as well.
    let c = Model1Coefficients::new(2, m1(checkerboard(), 0.0, 0.0, Remainder::None)).unwrap();
    let space = supercell_space(2, 1, 4).unwrap();
    let pipe2 = Model2Pipeline::new(Model2Diffeomorphism::identity(2, checkerboard(), 0.2).unwrap(), Normalization::VolumeNormalized, 1, 4, &tight()).unwrap();
    for seed in 300..305 {
        let r = Realization::new(seed);
        for eta in [0.2, 0.1, 0.05] {
            let w = solve_correctors_eta(&c, &r, eta, &space, &tight()).unwrap();
            let a1 = homogenized_eta(&c, &r, eta, &space, &w).unwrap();
            let a2 = pipe2.correctors_eta(&r, eta, &tight()).unwrap().1;
            err = err.max((a1 - a2).max_abs());
        }
    }
    Outcome { pass: err <= 1e-9 && a.len() == 3, detail: format!("max componentwise difference {err:.2e} over 3 grid points") }
}

fn model2_sweep() -> Outcome {
    band_outcome(&SweepSpec {
        dim: 2,
        family: FamilySpec::Model2 {
            diffeomorphism: m2(laminate(), 0.2, 0.0, 0.0, 0.2),
            normalization: Normalization::VolumeNormalized,
            sign: FirstOrderSign::Derived,
        },
        etas: vec![0.2, 0.1, 0.05],
        truncations: vec![1, 2],
        subdivisions: vec![4, 8],
        seeds: 50,
        seed_base: 4000,
        solver: SolverOptions::default(),
        band_factor: 4.0,
        fault_injection: vec![],
    })
}

fn reproducibility() -> Outcome {
    let spec = SweepSpec {
        dim: 2,
        family: FamilySpec::Model1 { coefficients: m1(checkerboard(), 0.3, 0.5, Remainder::Quadratic) },
        etas: vec![0.2, 0.05],
        truncations: vec![1, 2],
        subdivisions: vec![4],
        seeds: 12,
        seed_base: 9,
        solver: SolverOptions::default(),
        band_factor: 4.0,
        fault_injection: vec![],
    };
    let render = |workers: usize| {
        let rows = stochhom::ensemble::run_sweep(&spec, Some(workers)).unwrap();
        let mut wide = Vec::new();
        let mut long = Vec::new();
        write_wide_csv(2, &rows, &mut wide).unwrap();
        write_long_csv(&rows, &mut long).unwrap();
        (wide, long)
    };
    let reference = render(1);
    let counts = [1usize, 2, 3, 8];
    let same = counts.iter().all(|&w| render(w) == reference);
    Outcome { pass: same, detail: format!("wide and long CSV compared across worker counts {counts:?}") }
}

fn main() {
    let criteria: Vec<(&str, Duration, fn() -> Outcome)> = vec![
        ("constant-coefficient exactness", Duration::from_secs(1), constant_exactness),
        ("1D harmonic-mean oracle", Duration::from_secs(5), harmonic_mean_1d),
        ("2D laminate under refinement", Duration::from_secs(60), laminate_refinement),
        ("Model 1 second-order residual sweep", Duration::from_secs(15 * 60), model1_sweep),
        ("first-derivative consistency", Duration::from_secs(120), first_derivative),
        ("first-order limit study", Duration::from_secs(10 * 60), lemma21),
        ("diffeomorphism expansion validation", Duration::from_secs(30), lemma31),
        ("Model 2 identity reduction", Duration::from_secs(60), identity_reduction),
        ("Model 2 second-order residual sweep", Duration::from_secs(15 * 60), model2_sweep),
        ("sweep reproducibility", Duration::from_secs(15 * 60), reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let elapsed = start.elapsed();
        let pass = out.pass && elapsed <= limit;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {}: {} ({}; {:.2} s, limit {} s)",
            i + 1,
            name,
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
