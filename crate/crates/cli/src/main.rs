use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use stochhom::model2::Normalization;
use stochhom_cli::commands;
use stochhom_cli::config::LevelKind;
use stochhom_cli::{CliError, Overrides, RunConfig};

/// Corrector solves, homogenized matrices and Monte Carlo sweeps for weakly random coefficients.
#[derive(Parser)]
#[command(name = "stochhom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    AsPrinted,
    VolumeNormalized,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overrides `output_dir`.
    #[arg(long, env = "STOCHHOM_OUT")]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, env = "STOCHHOM_WORKERS")]
    workers: Option<usize>,
    /// Overrides `seeds.base`.
    #[arg(long)]
    seed_base: Option<u64>,
    /// Model-2 homogenized matrix normalization.
    #[arg(long, value_enum)]
    normalization: Option<NormalizationArg>,
}

#[derive(Args)]
struct PointArgs {
    #[arg(long, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    truncation: Option<usize>,
    #[arg(long)]
    subdivisions: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one corrector and dump its values and gradients.
    Corrector {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: PointArgs,
        /// Unit direction p, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        direction: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        level: Option<LevelKind>,
        /// Also write the mesh as JSON.
        #[arg(long)]
        dump_mesh: bool,
    },
    /// Homogenized matrices and residual report for one realization.
    Homogenize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        point: PointArgs,
    },
    /// Monte Carlo sweep over the configured grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Field-level validation suites.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(RunConfig, Option<usize>), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    let overrides = Overrides {
        out: common.out.clone(),
        seed_base: common.seed_base,
        normalization: common.normalization.map(|n| match n {
            NormalizationArg::AsPrinted => Normalization::AsPrinted,
            NormalizationArg::VolumeNormalized => Normalization::VolumeNormalized,
        }),
    };
    cfg.apply(&overrides)?;
    if common.workers == Some(0) {
        return Err(CliError::Config("--workers: must be >= 1".into()));
    }
    Ok((cfg, common.workers))
}

fn set_point(cfg: &mut RunConfig, p: &PointArgs) {
    let pt = &mut cfg.point;
    pt.eta = p.eta.or(pt.eta);
    pt.seed = p.seed.or(pt.seed);
    pt.truncation = p.truncation.or(pt.truncation);
    pt.subdivisions = p.subdivisions.or(pt.subdivisions);
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    match cli.command {
        Command::Corrector { common, point, direction, level, dump_mesh } => {
            let (mut cfg, _) = load(&common)?;
            set_point(&mut cfg, &point);
            cfg.point.direction = direction.or(cfg.point.direction.take());
            cfg.point.level = level.or(cfg.point.level);
            let dir = cfg.output_dir.clone();
            commands::corrector(cfg, dump_mesh)?;
            Ok(dir)
        }
        Command::Homogenize { common, point } => {
            let (mut cfg, _) = load(&common)?;
            set_point(&mut cfg, &point);
            let dir = cfg.output_dir.clone();
            commands::homogenize(cfg)?;
            Ok(dir)
        }
        Command::Sweep { common } => {
            let (cfg, workers) = load(&common)?;
            let dir = cfg.output_dir.clone();
            commands::sweep(cfg, workers)?;
            Ok(dir)
        }
        Command::Validate { common } => {
            let (cfg, _) = load(&common)?;
            let dir = cfg.output_dir.clone();
            commands::validate(cfg)?;
            Ok(dir)
        }
    }
}

fn main() {
    match run(Cli::parse()) {
        Ok(dir) => println!("results written to {}", dir.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
