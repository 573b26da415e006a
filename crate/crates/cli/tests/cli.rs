use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use stochhom::fields::{Model1Coefficients, Model1Params, PeriodicProfile, Realization, Remainder};
use stochhom::model1::{element_a_eta, supercell_space};
use stochhom_cli::RunConfig;
use tempfile::TempDir;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stochhom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochhom"))
        .args(args)
        .env_remove("STOCHHOM_OUT")
        .env_remove("STOCHHOM_WORKERS")
        .output()
        .expect("binary runs")
}

fn run_in(dir: &Path, sub: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    stochhom(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(|s| s.to_string()).collect()).collect()
}

fn long_value(path: &Path, quantity: &str, i: usize, j: usize) -> f64 {
    read_csv(path)
        .into_iter()
        .find(|r| r[0] == quantity && r[1] == i.to_string() && r[2] == j.to_string())
        .map(|r| r[3].parse().unwrap())
        .unwrap()
}

fn checkerboard_model1(amplitude: f64, eta_max: f64, extra: &str) -> String {
    format!(
        r#"dim = 2
[family]
model = "model1"
[family.coefficients]
amplitude = {amplitude}
remainder = "quadratic"
eta_max = {eta_max}
[family.coefficients.profile]
kind = "checkerboard"
low = 1.0
high = 4.0
[grid]
etas = [0.2, 0.1]
truncations = [1]
subdivisions = [2, 4]
[seeds]
count = 3
{extra}
"#
    )
}

#[test]
fn eta_beyond_validity_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &checkerboard_model1(0.3, 0.1, ""));
    for sub in ["corrector", "homogenize", "sweep"] {
        let o = run_in(&tmp.path().join("out"), sub, &cfg, &[]);
        assert_eq!(o.status.code(), Some(2), "{sub}: {}", stderr(&o));
        assert!(stderr(&o).contains("eta exceeds family validity"), "{sub}: {}", stderr(&o));
    }
    let o = run_in(&tmp.path().join("out"), "homogenize", &cfg, &["--eta", "0.5"]);
    assert!(stderr(&o).contains("point.eta"), "{}", stderr(&o));
    let o = run_in(&tmp.path().join("out"), "sweep", &cfg, &[]);
    assert!(stderr(&o).contains("grid.etas"), "{}", stderr(&o));
}

#[test]
fn malformed_configs_exit_2_naming_the_field() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let cases = [
        (checkerboard_model1(0.3, 1.0, "").replace("dim = 2", "dim = 3"), "dim"),
        (checkerboard_model1(0.3, 1.0, "").replace("count = 3", "count = 0"), "seeds.count"),
        (checkerboard_model1(0.3, 1.0, "[point]\ndirection = [1.0]"), "point.direction"),
        (checkerboard_model1(0.3, 1.0, "[point]\ndirection = [1.0, 1.0]"), "point.direction"),
        (checkerboard_model1(0.3, 1.0, "bogus = 1"), "bogus"),
        (checkerboard_model1(-0.3, 1.0, ""), "family"),
    ];
    for (text, field) in cases {
        let cfg = write_config(tmp.path(), "c.toml", &text);
        let o = run_in(&out, "corrector", &cfg, &[]);
        assert_eq!(o.status.code(), Some(2), "{field}: {}", stderr(&o));
        assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
    }
    let cfg = write_config(tmp.path(), "c.toml", &checkerboard_model1(0.3, 1.0, ""));
    let o = run_in(&out, "homogenize", &cfg, &["--normalization", "as-printed"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--normalization"));
    let o = run_in(&out, "sweep", &cfg, &["--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run_in(&out, "sweep", &tmp.path().join("missing.toml"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unattainable_tolerance_exits_3() {
    let tmp = TempDir::new().unwrap();
    let text = checkerboard_model1(0.3, 1.0, "[solver]\nrtol = 1e-300\nmax_iter_factor = 1");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    for sub in ["corrector", "homogenize"] {
        let o = run_in(&tmp.path().join("out"), sub, &cfg, &[]);
        assert_eq!(o.status.code(), Some(3), "{sub}: {}", stderr(&o));
        assert!(stderr(&o).contains("did not converge"), "{}", stderr(&o));
    }
}

#[test]
fn constant_coefficient_has_zero_gradients() {
    let tmp = TempDir::new().unwrap();
    let cfg = configs_dir().join("constant.toml");
    for level in ["eta", "zero", "one"] {
        let out = tmp.path().join(level);
        let o = run_in(&out, "corrector", &cfg, &["--level", level, "--direction", "0.6,0.8"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let rows = read_csv(&out.join("corrector_gradients.csv"));
        assert!(!rows.is_empty());
        for r in rows {
            assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
            assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
        }
        assert!(read_csv(&out.join("corrector_values.csv")).iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));
    }
    let out = tmp.path().join("h");
    assert!(run_in(&out, "homogenize", &cfg, &[]).status.success());
    let long = out.join("homogenized_long.csv");
    for (q, expect) in [("a_eta_star", [2.0, 0.0, 0.0, 3.0]), ("a_per_star", [2.0, 0.0, 0.0, 3.0]), ("a1_star", [0.0; 4])] {
        for (k, e) in expect.iter().enumerate() {
            assert!((long_value(&long, q, k / 2 + 1, k % 2 + 1) - e).abs() <= 1e-12, "{q}");
        }
    }
}

#[test]
fn one_dimensional_periodic_corrector_matches_harmonic_mean() {
    // a (1 + w0') = a* on every element, with a* = 1.6 and a in {1, 4}.
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let o = run_in(&out, "corrector", &configs_dir().join("two_phase_1d.toml"), &["--level", "zero", "--subdivisions", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for r in read_csv(&out.join("corrector_gradients.csv")) {
        let x: f64 = r[1].parse().unwrap();
        let g: f64 = r[2].parse().unwrap();
        let a = if x < 0.0 { 1.0 } else { 4.0 };
        assert!((a * (1.0 + g) - 1.6).abs() <= 1e-9, "x = {x}, g = {g}");
    }
}

#[test]
fn one_dimensional_realized_matrix_is_harmonic_mean() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = configs_dir().join("two_phase_1d.toml");
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let params = Model1Params {
        profile: PeriodicProfile::TwoPhase { low: 1.0, high: 4.0 },
        amplitude: 0.2,
        mean_shift: 0.0,
        remainder: Remainder::None,
        eta_max: 1.0,
    };
    let coeffs = Model1Coefficients::new(1, params).unwrap();
    let (n, s, eta) = (cfg.grid.truncations[0], cfg.grid.subdivisions[0], cfg.grid.etas[0]);
    let space = supercell_space(1, n, s).unwrap();
    for seed in [0u64, 7, 19] {
        let out = tmp.path().join(seed.to_string());
        let o = run_in(&out, "homogenize", &cfg_path, &["--seed", &seed.to_string()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let a = element_a_eta(&coeffs, &Realization::new(seed), eta, &space);
        let inv_mean: f64 = a.iter().map(|m| 1.0 / m.m[0][0]).sum::<f64>() / a.len() as f64;
        let got = long_value(&out.join("homogenized_long.csv"), "a_eta_star", 1, 1);
        assert!((got - 1.0 / inv_mean).abs() <= 1e-9, "seed {seed}: {got} vs {}", 1.0 / inv_mean);
        let per = long_value(&out.join("homogenized_long.csv"), "a_per_star", 1, 1);
        assert!((per - 1.6).abs() <= 1e-9);
    }
}

#[test]
fn identity_diffeomorphism_matches_model1() {
    let tmp = TempDir::new().unwrap();
    let m1 = checkerboard_model1(0.0, 1.0, "").replace("remainder = \"quadratic\"", "remainder = \"none\"");
    let m2 = r#"dim = 2
[family]
model = "model2"
[family.diffeomorphism]
amplitude = 0.0
eta_max = 0.2
[family.diffeomorphism.profile]
kind = "checkerboard"
low = 1.0
high = 4.0
[grid]
etas = [0.2, 0.1]
truncations = [1]
subdivisions = [2, 4]
[seeds]
count = 3
"#;
    let c1 = write_config(tmp.path(), "m1.toml", &m1);
    let c2 = write_config(tmp.path(), "m2.toml", m2);
    for eta in ["0.2", "0.1", "0.05"] {
        let (o1, o2) = (tmp.path().join(format!("a{eta}")), tmp.path().join(format!("b{eta}")));
        assert!(run_in(&o1, "homogenize", &c1, &["--eta", eta, "--seed", "5"]).status.success());
        assert!(run_in(&o2, "homogenize", &c2, &["--eta", eta, "--seed", "5"]).status.success());
        let (r1, r2) = (read_csv(&o1.join("homogenized_long.csv")), read_csv(&o2.join("homogenized_long.csv")));
        assert_eq!(r1.len(), r2.len());
        for (a, b) in r1.iter().zip(&r2) {
            let (x, y): (f64, f64) = (a[3].parse().unwrap(), b[3].parse().unwrap());
            assert!((x - y).abs() <= 1e-9, "{a:?} vs {b:?}");
        }
    }
    let o = run_in(&tmp.path().join("v"), "validate", &c2, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&tmp.path().join("v/validate.json"));
    assert!(v["suites"].as_array().unwrap().iter().all(|s| s["status"] == "pass"));
}

fn read_all(dir: &Path) -> Vec<(String, String)> {
    let mut names: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names.into_iter().map(|n| (n.clone(), std::fs::read_to_string(dir.join(&n)).unwrap())).collect()
}

fn without_timestamp(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"timestamp_unix\"")).collect::<Vec<_>>().join("\n")
}

#[test]
fn sweep_outputs_are_identical_across_runs_and_workers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &checkerboard_model1(0.3, 1.0, ""));
    let out = tmp.path().join("out");
    let mut runs = Vec::new();
    for workers in ["1", "3", "1"] {
        let o = run_in(&out, "sweep", &cfg, &["--workers", workers]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(read_all(&out));
    }
    for run in &runs[1..] {
        assert_eq!(run.len(), runs[0].len());
        for ((n0, t0), (n1, t1)) in runs[0].iter().zip(run) {
            assert_eq!(n0, n1);
            if n0.ends_with(".csv") {
                assert_eq!(t0, t1, "{n0}");
            } else {
                assert_eq!(without_timestamp(t0), without_timestamp(t1), "{n0}");
            }
        }
    }
    let rows = read_csv(&out.join("sweep_wide.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(read_csv(&out.join("sweep_long.csv")).len(), 4 * (4 * 4 + 4));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &checkerboard_model1(0.3, 1.0, ""));
    let out = tmp.path().join("out");
    assert!(run_in(&out, "sweep", &cfg, &["--seed-base", "11"]).status.success());
    let first = read_all(&out);
    let summary = json(&out.join("summary.json"));
    let echoed = summary["config_toml"].as_str().unwrap();
    let parsed = RunConfig::from_toml(echoed).unwrap();
    assert_eq!(parsed.seeds.base, 11);
    assert_eq!(serde_json::to_value(&parsed).unwrap(), summary["config"]);
    let replay = write_config(tmp.path(), "replay.toml", echoed);
    // No --out: the echoed output_dir points at the same directory.
    assert!(stochhom(&["sweep", "--config", replay.to_str().unwrap()]).status.success());
    let second = read_all(&out);
    for ((n0, t0), (_, t1)) in first.iter().zip(&second) {
        assert_eq!(without_timestamp(t0), without_timestamp(t1), "{n0}");
    }
}

#[test]
fn shipped_configs_round_trip() {
    let mut count = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let mut cfg = RunConfig::load(&path).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{}", path.display());
        cfg.resolve_point();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{}", path.display());
        count += 1;
    }
    assert!(count >= 5);
}

#[test]
fn environment_overrides_output_dir() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &checkerboard_model1(0.3, 1.0, ""));
    let env_out = tmp.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_stochhom"))
        .args(["homogenize", "--config", cfg.to_str().unwrap()])
        .env("STOCHHOM_OUT", &env_out)
        .env("STOCHHOM_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&env_out.join("homogenize.json"));
    assert_eq!(s["config"]["output_dir"], env_out.to_str().unwrap());
    assert_eq!(s["schema_version"], 1);
}

#[test]
fn degenerate_sweep_has_zero_residuals_and_passes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &checkerboard_model1(0.0, 1.0, ""));
    let out = tmp.path().join("out");
    let o = run_in(&out, "sweep", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for r in read_csv(&out.join("sweep_long.csv")) {
        if r[4] == "residual_matrix" || r[4] == "residual_max" || r[4] == "z_norm" {
            // Zero up to roundoff amplified by eta^-2.
            assert!(r[7].parse::<f64>().unwrap().abs() <= 1e-10, "{r:?}");
            assert!(r[8].parse::<f64>().unwrap().abs() <= 1e-10, "{r:?}");
        }
    }
    let s = json(&out.join("summary.json"));
    for suite in s["suites"].as_array().unwrap() {
        assert_ne!(suite["status"], "fail", "{suite}");
    }
}

#[test]
fn failed_seed_fails_the_band_suite_but_keeps_results() {
    let tmp = TempDir::new().unwrap();
    let extra = "[[fault_injection]]\neta = 0.1\ntruncation = 1\nsubdivisions = 4\nseed = 1";
    let cfg = write_config(tmp.path(), "c.toml", &checkerboard_model1(0.3, 1.0, extra));
    let out = tmp.path().join("out");
    let o = run_in(&out, "sweep", &cfg, &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let rows = read_csv(&out.join("sweep_wide.csv"));
    assert_eq!(rows.len(), 4);
    let failed: Vec<&Vec<String>> = rows.iter().filter(|r| !r[6].is_empty()).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0][6], "1");
    assert_eq!(failed[0][5], "2");
    let s = json(&out.join("summary.json"));
    assert_eq!(s["results"]["failed_tasks"], 1);
    assert!(s["suites"].as_array().unwrap().iter().any(|v| v["status"] == "fail"));
}

#[test]
fn nonstationary_field_fails_validation() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &checkerboard_model1(0.3, 1.0, "[validate]\ninject_nonstationary = true"));
    let out = tmp.path().join("out");
    let o = run_in(&out, "validate", &cfg, &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let v = json(&out.join("validate.json"));
    let st = v["suites"].as_array().unwrap().iter().find(|s| s["name"] == "stationarity").unwrap();
    assert_eq!(st["status"], "fail");
    let injected = st["detail"]["fields"].as_array().unwrap().iter().find(|f| f["field"] == "injected_nonstationary").unwrap();
    assert!(injected["max_discrepancy"].as_f64().unwrap() >= 1.0);
    for f in st["detail"]["fields"].as_array().unwrap().iter().filter(|f| f["field"] != "injected_nonstationary") {
        assert_eq!(f["pass"], true);
    }
}

#[test]
fn bump_family_satisfies_lemma_bounds() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run_in(&out, "validate", &configs_dir().join("bump_validate.toml"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&out.join("validate.json"));
    let l = v["suites"].as_array().unwrap().iter().find(|s| s["name"] == "lemma31").unwrap();
    assert_eq!(l["status"], "pass");
    for level in l["detail"]["levels"].as_array().unwrap() {
        assert!(level["eig_min"].as_f64().unwrap() >= 0.5);
        assert!(level["eig_max"].as_f64().unwrap() <= 1.5);
    }
    assert_eq!(l["detail"]["samples"], 10000);
}

#[test]
fn refinement_study_on_the_laminate_is_exact() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let o = run_in(&out, "sweep", &configs_dir().join("laminate_refinement.toml"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = json(&out.join("summary.json"));
    let r = s["suites"].as_array().unwrap().iter().find(|v| v["name"] == "refinement").unwrap();
    assert_eq!(r["status"], "pass");
    let fits = r["detail"]["rows"][0]["a_per_fit"].as_array().unwrap();
    assert!((fits[0]["extrapolated"].as_f64().unwrap() - 1.6).abs() <= 1e-3);
    assert!((fits[3]["extrapolated"].as_f64().unwrap() - 2.5).abs() <= 1e-3);
}

/// Verdicts of the shipped acceptance-grid sweeps, generated once and frozen.
#[test]
fn acceptance_grid_sweeps_reproduce_frozen_verdicts() {
    let frozen = json(&configs_dir().join("reference_verdicts.json"));
    let tmp = TempDir::new().unwrap();
    for (name, expected) in frozen.as_object().unwrap() {
        let out = tmp.path().join(name);
        let o = run_in(&out, "sweep", &configs_dir().join(format!("{name}.toml")), &[]);
        let s = json(&out.join("summary.json"));
        let code = o.status.code().unwrap();
        assert_eq!(code, expected["exit_code"].as_i64().unwrap() as i32, "{name}: {}", stderr(&o));
        for want in expected["suites"].as_array().unwrap() {
            let got = s["suites"].as_array().unwrap().iter().find(|v| v["name"] == want["name"]).unwrap();
            assert_eq!(got["status"], want["status"], "{name} {}", want["name"]);
            if let Some(ratio) = want["ratio"].as_f64() {
                let r = got["detail"]["ratio"].as_f64().unwrap();
                assert!((r - ratio).abs() <= 1e-9 * ratio.abs().max(1.0), "{name} {}: {r} vs {ratio}", want["name"]);
            }
        }
    }
}
