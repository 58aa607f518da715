//! `barrier-mbrl` command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure (safety violation, divergence,
//! failed check, unwritable output), 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use barrier_mbrl::experiments::{
    checks, fixed_weight_replay, sensitivity_sweep, simulate, ConfigError, RunResult, SimConfig, SweepSpec, SUITES,
    SWEEPABLE,
};
use barrier_mbrl::io::{write_summary, write_sweep, write_trajectory, Summary};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

#[derive(Parser)]
#[command(name = "barrier-mbrl", version, about = "Safe model-based RL simulations on box-constrained plants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML). Without it the built-in defaults of `--plant` are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario used when no config file is given.
    #[arg(long, default_value = "two_state", value_parser = PossibleValuesParser::new(["two_state", "robot"]))]
    plant: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override one config key, e.g. `--set dt=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed of the extrapolation grid; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one learning simulation and write trajectory.csv and summary.json.
    Simulate(Common),
    /// Closed loop under fixed policy weights, learning disabled.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Comma-separated weights.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "summary")]
        weights: Option<Vec<f64>>,
        /// Take the final critic weights from a previous summary.json.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// One-at-a-time sensitivity sweep of a single gain; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = PossibleValuesParser::new(SWEEPABLE))]
        param: String,
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        values: Vec<f64>,
        /// Concurrent runs; defaults to the available cores.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Run a property-check suite and print one line per check.
    Check {
        #[arg(value_parser = PossibleValuesParser::new(SUITES))]
        suite: String,
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("writing {}: {e}", path.display()))
}

fn load_config(c: &Common) -> Result<SimConfig, ConfigError> {
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &c.config {
        Some(path) => SimConfig::load(path, &overrides),
        None => SimConfig::from_toml_str(&format!("plant = \"{}\"\n", c.plant), &overrides),
    }
}

fn theta_true(cfg: &SimConfig) -> Result<Vec<f64>, ConfigError> {
    Ok(cfg.build()?.model.plant().theta_true().as_slice().to_vec())
}

/// Writes both run files and reports the outcome on stdout.
fn emit_run(cfg: &SimConfig, out: &Path, result: &RunResult) -> Result<(), Failure> {
    let traj = match result {
        Ok(o) => &o.trajectory,
        Err(f) => &f.partial,
    };
    let traj_path = out.join("trajectory.csv");
    write_trajectory(&traj_path, traj).map_err(|e| io_failure(&traj_path, e))?;
    let summary = Summary::from_run(cfg, &theta_true(cfg)?, result);
    let summary_path = out.join("summary.json");
    write_summary(&summary_path, &summary).map_err(|e| io_failure(&summary_path, e))?;

    println!("status      {}", summary.status);
    println!("seed        {}", summary.seed);
    println!("dt          {:e}", summary.dt);
    println!("safety_ok   {}", summary.safety_ok);
    if let Some(c) = summary.total_cost {
        println!("total_cost  {c:.6}");
    }
    if let Some(r) = summary.reference_cost {
        println!("reference   {r:.4}");
    }
    match summary.t_detected {
        Some(t) => println!("t_detected  {t:e}"),
        None => println!("t_detected  none"),
    }
    println!("theta_hat   {:?}", summary.theta_hat);
    println!("wrote       {} and {}", traj_path.display(), summary_path.display());
    match result {
        Ok(_) => Ok(()),
        Err(f) => Err(Failure::Runtime(f.error.to_string())),
    }
}

fn weights_from_summary(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("reading {}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("parsing {}: {e}", path.display())))?;
    v.get("w_c")
        .and_then(|w| w.as_array())
        .and_then(|w| w.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>())
        .filter(|w| !w.is_empty())
        .ok_or_else(|| Failure::Usage(format!("{} has no `w_c` array", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = load_config(&c)?;
            let result = simulate(&cfg)?;
            emit_run(&cfg, &c.out, &result)
        }
        Command::Replay { common, weights, summary } => {
            let cfg = load_config(&common)?;
            let w = match (weights, summary) {
                (Some(w), _) => w,
                (None, Some(path)) => weights_from_summary(&path)?,
                (None, None) => match simulate(&cfg)? {
                    Ok(out) => out.summary.w_c.as_slice().to_vec(),
                    Err(f) => return Err(Failure::Runtime(format!("learning run failed: {}", f.error))),
                },
            };
            let result = fixed_weight_replay(&cfg, &DVector::from_vec(w))?;
            emit_run(&cfg, &common.out, &result)
        }
        Command::Sweep { common, param, values, parallel } => {
            let cfg = load_config(&common)?;
            let spec = SweepSpec::new(&param, values, cfg)?;
            let workers = parallel
                .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
                .max(1);
            let rows = sensitivity_sweep(&spec, workers)?;
            let path = common.out.join("sweep.csv");
            write_sweep(&path, &param, &rows).map_err(|e| io_failure(&path, e))?;
            println!("{:>14}  {:>14}  {:>6}  status", param, "cost", "safe");
            for r in &rows {
                let cost = r.cost.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
                println!("{:>14}  {:>14}  {:>6}  {}", r.value, cost, r.safety_ok, r.status);
            }
            println!("wrote {}", path.display());
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} of {} runs failed", rows.len())));
            }
            Ok(())
        }
        Command::Check { suite, common } => {
            let cfg = load_config(&common)?;
            let lines = checks::run_suite(&suite, &cfg)?;
            for l in &lines {
                println!("{l}");
            }
            let failed = lines.iter().filter(|l| !l.pass).count();
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} check(s) failed in suite {suite}")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
