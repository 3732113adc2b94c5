use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod output;

#[derive(Parser, Debug)]
#[command(
    name = "parkdyn",
    version,
    about = "Parking dynamics: simulation, macro model, calibration and MPC pricing"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Scenario file (JSON). Defaults to the built-in 6x6 grid scenario.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seeds as a list and/or half-open ranges, e.g. `0..10` or `1,4,7..9`.
    #[arg(long, global = true, default_value = "0..10", value_parser = parse_seeds)]
    pub seeds: Seeds,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for replications (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seeds(pub Vec<u64>);

fn parse_seeds(s: &str) -> std::result::Result<Seeds, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.parse().map_err(|_| format!("bad seed range start in `{part}`"))?;
            let b: u64 = b.parse().map_err(|_| format!("bad seed range end in `{part}`"))?;
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| format!("bad seed `{part}`"))?);
        }
    }
    if out.is_empty() {
        return Err("at least one seed is needed".into());
    }
    Ok(Seeds(out))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build or check a network.
    Net {
        #[command(subcommand)]
        action: NetAction,
    },
    /// Run simulator replications.
    Micro {
        #[command(subcommand)]
        action: MicroAction,
    },
    /// Two-bin speed envelopes.
    Theory {
        #[command(subcommand)]
        action: TheoryAction,
    },
    /// Distance-to-park and time-to-park estimators.
    Estimators {
        #[command(subcommand)]
        action: EstimatorAction,
    },
    /// Accumulation-based macro model.
    Macro {
        #[command(subcommand)]
        action: MacroAction,
    },
    /// Fit macro inputs from simulator output.
    Calibrate(CalibrateArgs),
    /// Compare the calibrated macro model against simulator replications.
    Validate(CalibrationFile),
    /// Model predictive pricing.
    Mpc {
        #[command(subcommand)]
        action: MpcAction,
    },
    /// Run several control modes on the same seeds.
    Compare(CompareArgs),
}

#[derive(Subcommand, Debug)]
enum NetAction {
    /// Write the scenario network to `network.json`.
    Build,
    /// Load a network and check that it is usable.
    Check {
        /// Network file; defaults to the scenario network.
        #[arg(long)]
        network: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum MicroAction {
    /// Events, NFD and metrics for every seed, optionally over a sweep.
    Run {
        #[arg(long, value_enum, default_value_t = Sweep::None)]
        sweep: Sweep,
        /// Regional-guidance compliance used in the guidance sweep.
        #[arg(long, default_value_t = 1.0)]
        compliance: f64,
        /// Edie measurement window, s.
        #[arg(long, default_value_t = 60.0)]
        window: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    None,
    /// Passing demand {low, medium, high} by cruising speed {10, 30, 50}.
    Demand,
    /// No guidance, local, regional and joint guidance.
    Guidance,
}

#[derive(Subcommand, Debug)]
enum TheoryAction {
    /// Formula and brute-force envelopes on a density grid.
    Sweep(TheoryArgs),
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 50.0)]
    pub free_flow_speed: f64,
    #[arg(long, default_value_t = 100.0)]
    pub jam_density: f64,
    /// Cruising speeds, km/h.
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40")]
    pub cruise_speeds: Vec<f64>,
    /// Density grid step, veh/km.
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    /// Split lattice step of the brute-force check.
    #[arg(long, default_value_t = 0.01)]
    pub grid_step: f64,
    /// Largest accepted formula/brute-force difference, km/h.
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
}

#[derive(Subcommand, Debug)]
enum EstimatorAction {
    /// Fit occupancy-dependent estimators.
    Fit(FitArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// CSV with `occupancy,value` columns.
    #[arg(long, conflicts_with = "runs", required_unless_present = "runs")]
    pub observations: Option<PathBuf>,
    /// Output of `micro run`; distance-to-park observations are taken from its event logs.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelArg::All)]
    pub model: ModelArg,
    /// Occupancy bin width for averaging before the fit (0 fits raw observations).
    #[arg(long, default_value_t = 0.0)]
    pub bin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    All,
    ExpTime,
    HyperbolicTime,
    Geometric,
    ModifiedGeometric,
    ExpDistance,
}

#[derive(Subcommand, Debug)]
enum MacroAction {
    /// Simulate the macro model over the scenario demand.
    Run {
        #[command(flatten)]
        calibration: CalibrationFile,
        /// Fixed on-street price; defaults to the scenario fee.
        #[arg(long)]
        price_on: Option<f64>,
        #[arg(long)]
        price_off: Option<f64>,
        /// Macro step, s.
        #[arg(long, default_value_t = 10.0)]
        dt: f64,
    },
}

#[derive(Args, Debug)]
pub struct CalibrationFile {
    #[arg(long)]
    pub calibration: PathBuf,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Output of `micro run`. Without it, replications are simulated first.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long, default_value_t = 60.0)]
    pub window: f64,
}

#[derive(Subcommand, Debug)]
enum MpcAction {
    /// Closed-loop pricing on the simulator for every seed.
    Run(MpcArgs),
}

#[derive(Args, Debug)]
pub struct MpcArgs {
    #[command(flatten)]
    pub calibration: CalibrationFile,
    /// Controller settings (JSON); defaults to 15-min intervals, two per horizon.
    #[arg(long)]
    pub mpc_config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Calibration file; required.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub mpc_config: Option<PathBuf>,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "no-price,mpc,full-horizon-dynamic,full-horizon-static"
    )]
    pub modes: Vec<ModeArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    NoPrice,
    Mpc,
    FullHorizonDynamic,
    FullHorizonStatic,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.global.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.jobs)
            .build_global()
            .context("configuring worker threads")?;
    }
    std::fs::create_dir_all(&cli.global.out)
        .with_context(|| format!("creating output directory {}", cli.global.out.display()))?;
    let g = &cli.global;
    match cli.command {
        Command::Net { action } => match action {
            NetAction::Build => commands::net_build(g),
            NetAction::Check { network } => commands::net_check(g, network.as_deref()),
        },
        Command::Micro {
            action:
                MicroAction::Run {
                    sweep,
                    compliance,
                    window,
                },
        } => match sweep {
            Sweep::None => commands::micro_run(g, window),
            Sweep::Demand => commands::demand_sweep(g, window),
            Sweep::Guidance => commands::guidance_sweep(g, compliance),
        },
        Command::Theory {
            action: TheoryAction::Sweep(args),
        } => commands::theory_sweep(g, &args),
        Command::Estimators {
            action: EstimatorAction::Fit(args),
        } => commands::estimators_fit(g, &args),
        Command::Macro {
            action:
                MacroAction::Run {
                    calibration,
                    price_on,
                    price_off,
                    dt,
                },
        } => commands::macro_run(g, &calibration.calibration, price_on, price_off, dt),
        Command::Calibrate(args) => commands::calibrate(g, &args),
        Command::Validate(c) => commands::validate(g, &c.calibration),
        Command::Mpc {
            action: MpcAction::Run(args),
        } => commands::mpc_run(g, &args),
        Command::Compare(args) => {
            let Some(calibration) = &args.calibration else {
                bail!("compare needs --calibration (run `parkdyn calibrate` first)");
            };
            commands::compare(g, calibration, args.mpc_config.as_deref(), &args.modes)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(parse_seeds("0..3").unwrap(), Seeds(vec![0, 1, 2]));
        assert_eq!(parse_seeds("5, 1..3,9").unwrap(), Seeds(vec![5, 1, 2, 9]));
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
