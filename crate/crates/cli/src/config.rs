//! Run configuration: one TOML file drives every subcommand.

use crate::CliError;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use stochhom::ensemble::{FaultInjection, FamilySpec, SweepSpec};
use stochhom::fem::SolverOptions;
use stochhom::model2::Normalization;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub family: FamilySpec,
    pub grid: Grid,
    pub seeds: Seeds,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub point: Point,
    #[serde(default)]
    pub suites: Suites,
    #[serde(default)]
    pub validate: ValidateSettings,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fault_injection: Vec<FaultInjection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub etas: Vec<f64>,
    pub truncations: Vec<usize>,
    pub subdivisions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub base: u64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LevelKind {
    Eta,
    Zero,
    One,
}

/// Single-solve settings for `corrector` and `homogenize`. Unset entries
/// default to the first grid point, the seed base and e_1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Point {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<LevelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subdivisions: Option<usize>,
}

/// Studies run by `sweep` and their pass thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Suites {
    pub band: bool,
    pub band_factor: f64,
    pub lemma21: bool,
    /// Required ratio of the last to the first truncation's mean deviation.
    pub lemma21_ratio: f64,
    pub refinement: bool,
    /// Smallest accepted observed order of the A*_per^h fits.
    pub refinement_min_order: f64,
}

impl Default for Suites {
    fn default() -> Self {
        Suites { band: true, band_factor: 4.0, lemma21: false, lemma21_ratio: 0.5, refinement: false, refinement_min_order: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSettings {
    /// Empty means the grid etas.
    pub lemma31_etas: Vec<f64>,
    pub lemma31_samples: usize,
    pub stationarity_shifts: Vec<Vec<i64>>,
    pub stationarity_samples: usize,
    pub stationarity_tolerance: f64,
    pub ergodic_truncations: Vec<usize>,
    pub ergodic_point: Vec<f64>,
    /// Allowed deviation of an ergodic average in standard errors.
    pub ergodic_sigmas: f64,
    /// Adds the non-stationary field x_1 + A(x) to the stationarity suite.
    pub inject_nonstationary: bool,
}

impl Default for ValidateSettings {
    fn default() -> Self {
        ValidateSettings {
            lemma31_etas: Vec::new(),
            lemma31_samples: 10_000,
            stationarity_shifts: vec![vec![1, 0], vec![0, 1], vec![2, -3]],
            stationarity_samples: 1000,
            stationarity_tolerance: 1e-12,
            ergodic_truncations: vec![1, 2, 4, 8],
            ergodic_point: vec![0.1, 0.2],
            ergodic_sigmas: 4.0,
            inject_nonstationary: false,
        }
    }
}

/// Command-line and environment overrides.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed_base: Option<u64>,
    pub normalization: Option<Normalization>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(base) = o.seed_base {
            self.seeds.base = base;
        }
        if let Some(n) = o.normalization {
            match &mut self.family {
                FamilySpec::Model2 { normalization, .. } => *normalization = n,
                FamilySpec::Model1 { .. } => {
                    return Err(CliError::Config("--normalization: only applies to model2 families".into()));
                }
            }
        }
        Ok(())
    }

    /// Structural checks that do not need the family to be built.
    pub fn check(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if !(1..=2).contains(&self.dim) {
            return bad("dim", format!("must be 1 or 2, got {}", self.dim));
        }
        if self.grid.etas.is_empty() || self.grid.truncations.is_empty() || self.grid.subdivisions.is_empty() {
            return bad("grid", "etas, truncations and subdivisions must be non-empty".into());
        }
        if self.grid.subdivisions.contains(&0) {
            return bad("grid.subdivisions", "must be >= 1".into());
        }
        if self.seeds.count == 0 {
            return bad("seeds.count", "must be >= 1".into());
        }
        if !(self.solver.rtol > 0.0) || self.solver.max_iter_factor == 0 {
            return bad("solver", "rtol must be > 0 and max_iter_factor >= 1".into());
        }
        if let Some(p) = &self.point.direction {
            if p.len() != self.dim {
                return bad("point.direction", format!("needs {} components, got {}", self.dim, p.len()));
            }
        }
        if let Some(0) = self.point.subdivisions {
            return bad("point.subdivisions", "must be >= 1".into());
        }
        let v = &self.validate;
        if v.ergodic_point.len() < self.dim {
            return bad("validate.ergodic_point", format!("needs {} components", self.dim));
        }
        if v.stationarity_shifts.iter().any(|k| k.len() < self.dim) {
            return bad("validate.stationarity_shifts", format!("every shift needs {} components", self.dim));
        }
        Ok(())
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            dim: self.dim,
            family: self.family.clone(),
            etas: self.grid.etas.clone(),
            truncations: self.grid.truncations.clone(),
            subdivisions: self.grid.subdivisions.clone(),
            seeds: self.seeds.count,
            seed_base: self.seeds.base,
            solver: self.solver,
            band_factor: self.suites.band_factor,
            fault_injection: self.fault_injection.clone(),
        }
    }

    /// Fills every unset single-solve entry so the echoed config is complete.
    pub fn resolve_point(&mut self) {
        let dim = self.dim;
        let p = &mut self.point;
        p.eta.get_or_insert(self.grid.etas[0]);
        p.seed.get_or_insert(self.seeds.base);
        p.direction.get_or_insert_with(|| {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            e
        });
        p.level.get_or_insert(LevelKind::Eta);
        p.truncation.get_or_insert(self.grid.truncations[0]);
        p.subdivisions.get_or_insert(self.grid.subdivisions[0]);
    }
}
