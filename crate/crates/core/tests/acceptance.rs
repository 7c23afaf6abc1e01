//! One PASS/FAIL line per acceptance criterion; exits nonzero on any FAIL.
//! Battery outputs land in `$CARGO_TARGET_TMPDIR/acceptance/<model>/`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use lqmhpe::dynamics::ModelSpec;
use lqmhpe::monte_carlo::*;
use lqmhpe::validation::{self, Check};

const TRIALS: usize = 100;
const SEED: u64 = 0;
const COST_TIME_LIMIT: f64 = 1800.0;
const CRAZYFLIE_TARGET: f64 = 0.20;
const FUSION_TARGET: f64 = 0.15;
const CONVERGED_FRACTION: f64 = 0.80;
const DETERMINISM_TRIALS: usize = 12;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, passed: bool, name: &str, text: String) {
        if !passed {
            self.failures += 1;
        }
        println!("{} {name}: {text}", if passed { "PASS" } else { "FAIL" });
    }

    fn check(&mut self, c: &Check) {
        if !c.passed {
            self.failures += 1;
        }
        println!("{c}");
    }
}

fn out_dir(model: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(model)
}

fn battery(model: ModelSpec, schemes: Vec<Scheme>, trials: usize) -> BatteryConfig {
    BatteryConfig { trial: TrialConfig::for_model(model), schemes, trials, base_seed: SEED }
}

fn run(cfg: &BatteryConfig) -> (Battery, Summary) {
    let b = run_battery(cfg, None, false).expect("battery");
    let s = write_outputs(&out_dir(&cfg.trial.model.name), &b, None).expect("outputs");
    (b, s)
}

fn reduction(s: &Summary, scheme: Scheme, baseline: Scheme) -> f64 {
    s.comparisons
        .iter()
        .find(|c| c.scheme == scheme && c.baseline == baseline)
        .map(|c| c.reduction)
        .expect("comparison")
}

fn mean_cost(s: &Summary, scheme: Scheme) -> f64 {
    s.schemes.iter().find(|x| x.scheme == scheme).expect("scheme").cost.mean
}

fn target(r: f64, t: f64) -> String {
    format!("{:.1}% (target >= {:.0}%: {})", 100.0 * r, 100.0 * t, if r >= t { "met" } else { "missed" })
}

fn main() -> ExitCode {
    let mut rep = Report { failures: 0 };
    let opts = validation::ValidationOptions { quick: false, seed: SEED, corrupt_input_matrix: false };

    rep.check(&validation::affine_equivalence(10_000, opts.seed, false));
    rep.check(&validation::gradient_suite(100, opts.seed + 1));
    rep.check(&validation::qp_oracle(200, opts.seed + 2));
    let fp = validation::estimator_fixed_points(50, opts.seed + 3);
    rep.line(
        fp.iter().all(|c| c.passed),
        "estimator_fixed_points",
        fp.iter().map(|c| format!("[{c}]")).collect::<Vec<_>>().join(" "),
    );
    rep.check(&validation::bound_soundness(100_000, opts.seed + 5));
    rep.check(&validation::solve_time_ratio(100, opts.seed + 6));

    let start = Instant::now();
    let (_, cf) = run(&battery(ModelSpec::crazyflie(), Scheme::ALL.to_vec(), TRIALS));
    let cf_time = start.elapsed().as_secs_f64();
    let (_, fu) = run(&battery(ModelSpec::fusion1(), vec![Scheme::LqMhpe, Scheme::None], TRIALS));
    let cost_time = start.elapsed().as_secs_f64();

    let cf_red = reduction(&cf, Scheme::LqMhpe, Scheme::None);
    let fu_red = reduction(&fu, Scheme::LqMhpe, Scheme::None);
    let ordered = mean_cost(&cf, Scheme::LqMhpe) < mean_cost(&cf, Scheme::None)
        && mean_cost(&fu, Scheme::LqMhpe) < mean_cost(&fu, Scheme::None);
    rep.line(
        ordered && cost_time <= COST_TIME_LIMIT,
        "trajectory_cost_direction",
        format!(
            "mean cost reduction vs none over {TRIALS} paired trials: crazyflie {}, fusion1 {}; \
             in {cost_time:.0} s (crazyflie {cf_time:.0} s, limit {COST_TIME_LIMIT} s)",
            target(cf_red, CRAZYFLIE_TARGET),
            target(fu_red, FUSION_TARGET)
        ),
    );
    println!(
        "INFO lq_mhpe_vs_nmhpe: crazyflie mean cost reduction {:.1}% (lq {:.4e}, nmhpe {:.4e}, none {:.4e}); not gated",
        100.0 * reduction(&cf, Scheme::LqMhpe, Scheme::Nmhpe),
        mean_cost(&cf, Scheme::LqMhpe),
        mean_cost(&cf, Scheme::Nmhpe),
        mean_cost(&cf, Scheme::None)
    );

    let lq = fu.schemes.iter().find(|s| s.scheme == Scheme::LqMhpe).expect("lq");
    rep.line(
        lq.convergence_rate >= CONVERGED_FRACTION,
        "convergence_basin",
        format!(
            "{}/{} fusion1 lq_mhpe trials end with |p| < {} m (need >= {:.0}%); none: {}/{}",
            lq.converged,
            lq.trials,
            fu.config.trial.convergence_radius,
            100.0 * CONVERGED_FRACTION,
            fu.schemes.iter().find(|s| s.scheme == Scheme::None).map_or(0, |s| s.converged),
            TRIALS
        ),
    );

    let cfg = battery(ModelSpec::crazyflie(), Scheme::ALL.to_vec(), DETERMINISM_TRIALS);
    let dir = out_dir("determinism");
    std::fs::create_dir_all(&dir).expect("dir");
    let files: Vec<Vec<u8>> = [Some(1), None]
        .into_iter()
        .enumerate()
        .map(|(i, jobs)| {
            let b = run_battery(&cfg, jobs, false).expect("battery");
            let path = dir.join(format!("records{i}.csv"));
            write_records(&path, &b.records).expect("records");
            std::fs::read(path).expect("read")
        })
        .collect();
    rep.line(
        files[0] == files[1],
        "determinism",
        format!(
            "records.csv of two {}-trial x 3-scheme batteries (1 worker vs default pool) {} ({} bytes)",
            DETERMINISM_TRIALS,
            if files[0] == files[1] { "bit-identical" } else { "differ" },
            files[0].len()
        ),
    );

    println!("outputs under {}", out_dir("").display());
    if rep.failures == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance criteria failed", rep.failures);
        ExitCode::FAILURE
    }
}
