mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lqmhpe::monte_carlo::{self, SchemeTiming, Summary};
use lqmhpe::validation::{self, ValidationOptions};
use serde::Serialize;

use config::{FileConfig, Overrides};

const EXIT_CONFIG: u8 = 1;
const EXIT_VALIDATION: u8 = 2;

const OUTPUT_HELP: &str = "\
OUTPUT FILES (written under --out):
  records.csv   one row per (scheme, seed), schemes in the requested order, seeds ascending:
                  seed, scheme, model, cost, diverged, final_position_error, steps,
                  estimator_failures, planner_fallbacks
                cost is the realized stage cost summed over the trial (the configured ceiling
                when diverged); final_position_error is |p| at the last step. The file holds
                no wall-clock data, so it is bit-identical for identical seeds and settings.
  timings.csv   one row per (scheme, seed), same order:
                  seed, scheme, model, estimator_mean, estimator_min, estimator_max,
                  nmpc_mean, nmpc_min, nmpc_max
                solve times in seconds; estimator columns are empty for scheme none and skip
                the first step, whose window holds no transitions.
  summary.json  {invocation, config, schemes, comparisons}: the flags as given, the fully
                resolved configuration, per-scheme cost / final-position-error statistics
                (best, mean, median, worst, count) with divergence and convergence counts,
                and relative mean-cost reductions (1 - mean_a / mean_b).
  timing.json   per-scheme solve-time statistics (seconds).
  traces/<scheme>/<seed>.csv   with --trace; one row per step:
                  t, px, py, pz, qw, qx, qy, qz, vx, vy, vz, wx, wy, wz, u1..um, est_<param>...
                the last row holds the final state with empty (NaN) inputs; the estimate
                columns are the relaxed parameters for lq_mhpe and physical ones otherwise.

EXIT CODES:
  0 success, 1 configuration or runtime error, 2 validation failure";

#[derive(Parser, Debug)]
#[command(name = "lqmhpe", version, about = "Adaptive multirotor NMPC benchmarks with moving-horizon parameter estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a Monte Carlo battery and write records, timings and summaries.
    #[command(after_long_help = OUTPUT_HELP)]
    Run(RunArgs),
    /// Run the oracle and property suites.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Serialize)]
struct RunArgs {
    /// TOML configuration with [model], [trial], [nmpc] and [battery] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in model: crazyflie or fusion1.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated schemes (lq_mhpe, nmhpe, none) or `all`.
    #[arg(long)]
    scheme: Option<String>,
    /// Trials per scheme.
    #[arg(long)]
    trials: Option<usize>,
    /// Seed of the first trial; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (all cores when absent).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, env = "LQMHPE_OUT", default_value = "results")]
    out: PathBuf,
    /// NMPC horizon length in steps.
    #[arg(long)]
    horizon_n: Option<usize>,
    /// Estimator window length in transitions.
    #[arg(long)]
    horizon_m: Option<usize>,
    /// Comma-separated diagonal of the NMPC state weight (13 entries).
    #[arg(long, value_delimiter = ',')]
    q_diag: Option<Vec<f64>>,
    /// NMPC per-rotor input weight.
    #[arg(long)]
    r_weight: Option<f64>,
    /// Write per-step traces.
    #[arg(long)]
    trace: bool,
    /// Suppress the summary table.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Reduced sample counts.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flip the sign of the relaxed input matrix (negative control).
    #[arg(long, hide = true)]
    corrupt_input_matrix: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Run(args) => match run(&args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::Validate(args) => validate(&args),
    }
}

fn overrides(args: &RunArgs) -> Result<Overrides> {
    Ok(Overrides {
        model: args.model.clone(),
        schemes: args.scheme.as_deref().map(config::parse_schemes).transpose().context("--scheme")?,
        trials: args.trials,
        seed: args.seed,
        horizon_n: args.horizon_n,
        horizon_m: args.horizon_m,
        q_diag: args.q_diag.clone(),
        r_weight: args.r_weight,
    })
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let probe = dir.join(".write-test");
    fs::write(&probe, b"").with_context(|| format!("output directory {} is not writable", dir.display()))?;
    fs::remove_file(&probe)?;
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let file = match &args.config {
        Some(p) => config::load(p)?,
        None => FileConfig::default(),
    };
    let cfg = config::resolve(&file, &overrides(args)?)?;
    prepare_out(&args.out)?;
    if let Some(0) = args.jobs {
        anyhow::bail!("--jobs must be at least 1");
    }

    let start = Instant::now();
    let battery = monte_carlo::run_battery(&cfg, args.jobs, args.trace)?;
    let invocation = serde_json::to_value(args)?;
    let summary = monte_carlo::write_outputs(&args.out, &battery, Some(&invocation))?;
    if !args.quiet {
        let timing = monte_carlo::timing_summary(&cfg, &battery.records);
        print_summary(&summary, &timing);
        println!(
            "{} trials in {:.1} s -> {}",
            battery.records.len(),
            start.elapsed().as_secs_f64(),
            args.out.display()
        );
    }
    Ok(())
}

fn print_summary(s: &Summary, timing: &[SchemeTiming]) {
    println!("model {}  trials/scheme {}  base seed {}", s.config.trial.model.name, s.config.trials, s.config.base_seed);
    println!(
        "{:<8} {:>11} {:>11} {:>11} {:>11} {:>9} {:>9} {:>11} {:>11}",
        "scheme", "cost best", "cost mean", "cost median", "cost worst", "converged", "diverged", "est mean s", "nmpc mean s"
    );
    for sc in &s.schemes {
        let t = timing.iter().find(|t| t.scheme == sc.scheme);
        let est = t.and_then(|t| t.estimator).map_or("-".to_string(), |e| format!("{:.3e}", e.mean));
        let nmpc = t.map_or("-".to_string(), |t| format!("{:.3e}", t.nmpc.mean));
        println!(
            "{:<8} {:>11.4e} {:>11.4e} {:>11.4e} {:>11.4e} {:>9} {:>9} {:>11} {:>11}",
            sc.scheme.as_str(),
            sc.cost.best,
            sc.cost.mean,
            sc.cost.median,
            sc.cost.worst,
            sc.converged,
            sc.diverged,
            est,
            nmpc
        );
    }
    for c in &s.comparisons {
        println!("mean cost {} vs {}: {:+.1}% reduction", c.scheme, c.baseline, 100.0 * c.reduction);
    }
}

fn validate(args: &ValidateArgs) -> ExitCode {
    let opts = ValidationOptions { quick: args.quick, seed: args.seed, corrupt_input_matrix: args.corrupt_input_matrix };
    let checks = validation::run_all(&opts);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VALIDATION)
    }
}
