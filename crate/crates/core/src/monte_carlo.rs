//! Closed-loop Monte Carlo trials: random true parameters, random initial
//! state and bounded random disturbances, flown by the NMPC with or without
//! an online parameter estimator.
//!
//! Every trial is a pure function of its config and seed. The random draws
//! depend on the seed only, so the three schemes see the same true vehicle,
//! initial state and noise sequence (common random numbers).

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attitude::Quaternion;
use crate::dynamics::{
    add_disturbance, rk4_step_with_gravity, DisturbanceChannels, DynamicsError, ModelSpec,
    NominalParams, State, STATE_DIM,
};
use crate::mhpe::{
    default_sqp_settings, estimate_nonlinear, EstimateStatus, EstimatorError, EstimatorState, HorizonWindow,
    LqEstimator, DEFAULT_DISTURBANCE_WEIGHT, DEFAULT_WINDOW,
};
use crate::nlp::SqpSettings;
use crate::nmpc::{apply_first, NmpcConfig, NmpcError, ParameterEstimate, PlanStatus, Planner, PlannedTrajectory};
use crate::relaxation::{ParamBox, RelaxationError, RelaxedParams};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("invalid trial config: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Relaxation(#[from] RelaxationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Nmpc(#[from] NmpcError),
    #[error("output: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LqMhpe,
    Nmhpe,
    None,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::LqMhpe, Scheme::Nmhpe, Scheme::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::LqMhpe => "lq_mhpe",
            Scheme::Nmhpe => "nmhpe",
            Scheme::None => "none",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lq_mhpe" | "lq" => Ok(Scheme::LqMhpe),
            "nmhpe" | "nonlinear" => Ok(Scheme::Nmhpe),
            "none" => Ok(Scheme::None),
            _ => Err(format!("unknown scheme '{s}' (expected lq_mhpe, nmhpe or none)")),
        }
    }
}

/// Everything about a trial except its scheme and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub model: ModelSpec,
    /// Simulated time in seconds.
    pub duration: f64,
    pub dt: f64,
    /// True parameters are drawn from `[lo·θ₀, hi·θ₀]`.
    pub param_factors: [f64; 2],
    /// Disturbance rates are drawn from `[−b, b]` per channel.
    pub noise_bound: f64,
    pub disturbance_channels: DisturbanceChannels,
    pub position_bound: f64,
    pub velocity_bound: f64,
    pub angular_velocity_bound: f64,
    /// Uniform random initial attitude; identity when false.
    pub random_attitude: bool,
    pub nmpc: NmpcConfig,
    /// Estimator window length in transitions.
    pub window: usize,
    pub disturbance_weight: f64,
    pub nmhpe_max_iter: usize,
    /// Cost recorded for a diverged trial.
    pub cost_ceiling: f64,
    /// Position norm beyond which a trial counts as diverged.
    pub divergence_radius: f64,
    /// `‖p‖` below which a trial counts as converged at the final step.
    pub convergence_radius: f64,
}

impl TrialConfig {
    /// Defaults for a model, with the initial-state bounds of the named
    /// vehicles (the Crazyflie bounds for any other name).
    pub fn for_model(model: ModelSpec) -> Self {
        let (pos, vel, ang) = match model.name.as_str() {
            "fusion1" => (10.0, 5.0, 5.0),
            _ => (5.0, 2.5, 2.5),
        };
        Self {
            model,
            duration: 10.0,
            dt: 0.02,
            param_factors: [0.5, 1.5],
            noise_bound: 2.5,
            disturbance_channels: DisturbanceChannels::PositionVelocityRate,
            position_bound: pos,
            velocity_bound: vel,
            angular_velocity_bound: ang,
            random_attitude: true,
            nmpc: NmpcConfig::default(),
            window: DEFAULT_WINDOW,
            disturbance_weight: DEFAULT_DISTURBANCE_WEIGHT,
            nmhpe_max_iter: default_sqp_settings().max_iter,
            cost_ceiling: 1e8,
            divergence_radius: 1e3,
            convergence_radius: 1.0,
        }
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), TrialError> {
        let bad = |m: String| Err(TrialError::Config(m));
        self.model.params.validate()?;
        let finite_pos = |v: f64| v > 0.0 && v.is_finite();
        let finite_nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !finite_pos(self.dt) || !finite_pos(self.duration) {
            return bad("dt and duration must be positive and finite".into());
        }
        let n = (self.duration / self.dt).round();
        if n < 1.0 || (n * self.dt - self.duration).abs() > 1e-9 * self.duration.max(1.0) {
            return bad(format!("dt = {} does not divide duration = {}", self.dt, self.duration));
        }
        let [lo, hi] = self.param_factors;
        if !(finite_pos(lo) && hi.is_finite() && lo <= hi) {
            return bad(format!("param_factors must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        for (name, v) in [
            ("noise_bound", self.noise_bound),
            ("position_bound", self.position_bound),
            ("velocity_bound", self.velocity_bound),
            ("angular_velocity_bound", self.angular_velocity_bound),
        ] {
            if !finite_nonneg(v) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if !finite_pos(self.disturbance_weight) {
            return bad("disturbance_weight must be positive".into());
        }
        if !finite_pos(self.cost_ceiling) || !finite_pos(self.divergence_radius) || !finite_pos(self.convergence_radius) {
            return bad("cost_ceiling, divergence_radius and convergence_radius must be positive".into());
        }
        if !finite_pos(self.model.u_max) {
            return bad("model u_max must be positive".into());
        }
        self.nmpc.validate()?;
        Ok(())
    }

    fn param_box(&self) -> Result<ParamBox, TrialError> {
        Ok(ParamBox::from_factors(&self.model.params, self.param_factors[0], self.param_factors[1])?)
    }
}

/// The random draws of one seed, shared by every scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSetup {
    pub theta_true: NominalParams,
    pub x0: State,
    /// Per-step disturbance rates (all 13 channels drawn; masked when applied).
    pub noise: Vec<[f64; STATE_DIM]>,
}

impl TrialSetup {
    pub fn draw(cfg: &TrialConfig, seed: u64) -> Result<Self, TrialError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = cfg.param_box()?;
        let theta: Vec<f64> = bx.lower.iter().zip(&bx.upper).map(|(l, u)| uniform(&mut rng, *l, *u)).collect();
        let theta_true = NominalParams::from_slice(cfg.model.rotors(), &theta)?;

        let mut x0 = State::hover();
        for i in 0..3 {
            x0.p[i] = uniform(&mut rng, -cfg.position_bound, cfg.position_bound);
            x0.v[i] = uniform(&mut rng, -cfg.velocity_bound, cfg.velocity_bound);
            x0.omega[i] = uniform(&mut rng, -cfg.angular_velocity_bound, cfg.angular_velocity_bound);
        }
        // always consumed so that the noise stream does not depend on the flag
        let q = random_quaternion(&mut rng);
        if cfg.random_attitude {
            x0.q = q;
        }

        let b = cfg.noise_bound;
        let noise = (0..cfg.steps()).map(|_| std::array::from_fn(|_| uniform(&mut rng, -b, b))).collect();
        Ok(Self { theta_true, x0, noise })
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Uniform on the unit 3-sphere (Shoemake).
fn random_quaternion(rng: &mut impl Rng) -> Quaternion {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    Quaternion::new(b * (tau * u3).cos(), a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub scheme: Scheme,
    pub model: String,
    /// Realized `Σₖ ‖x_k − x̄‖²_Q + ‖u_k − ū‖²_R` at the true hover thrust,
    /// or the ceiling when diverged.
    pub cost: f64,
    pub diverged: bool,
    /// `‖p‖` at the last finite state.
    pub final_position_error: f64,
    pub steps: usize,
    pub estimator_failures: usize,
    pub planner_fallbacks: usize,
    /// Per-step estimator wall times in seconds; empty for `none`. The first
    /// entry is the empty-window call.
    pub estimator_times: Vec<f64>,
    pub nmpc_times: Vec<f64>,
}

impl TrialRecord {
    pub fn converged(&self, radius: f64) -> bool {
        !self.diverged && self.final_position_error < radius
    }
}

/// One logged step: the state, the applied input and the estimate used.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub state: [f64; STATE_DIM],
    pub input: Vec<f64>,
    pub estimate: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrialOutput {
    pub record: TrialRecord,
    pub trace: Option<Vec<TraceRow>>,
}

enum Estimator {
    None,
    Lq(LqEstimator, EstimatorState),
    Nonlinear(EstimatorState),
}

impl Estimator {
    fn build(cfg: &TrialConfig, scheme: Scheme) -> Result<Self, TrialError> {
        let theta0 = &cfg.model.params;
        let bx = cfg.param_box()?;
        Ok(match scheme {
            Scheme::None => Estimator::None,
            Scheme::LqMhpe => {
                Estimator::Lq(LqEstimator::default(), EstimatorState::relaxed(theta0, &bx, cfg.disturbance_weight)?)
            }
            Scheme::Nmhpe => Estimator::Nonlinear(EstimatorState::nominal(theta0, bx, cfg.disturbance_weight)?),
        })
    }

    fn initial(&self, theta0: &NominalParams) -> ParameterEstimate {
        match self {
            Estimator::Lq(_, st) => {
                ParameterEstimate::Relaxed(RelaxedParams::from_slice(theta0.rotors(), &st.prior).expect("prior dims"))
            }
            _ => ParameterEstimate::Nominal(theta0.clone()),
        }
    }
}

fn estimate_vector(e: &ParameterEstimate) -> Vec<f64> {
    match e {
        ParameterEstimate::Nominal(t) => t.to_vec(),
        ParameterEstimate::Relaxed(v) => v.to_vec(),
    }
}

/// Runs one closed-loop trial: estimate, plan, apply the first input,
/// integrate the true dynamics, add the disturbance.
pub fn run_trial(cfg: &TrialConfig, scheme: Scheme, seed: u64, trace: bool) -> Result<TrialOutput, TrialError> {
    cfg.validate()?;
    let setup = TrialSetup::draw(cfg, seed)?;
    run_trial_with(cfg, scheme, seed, &setup, trace)
}

/// [`run_trial`] on explicit draws.
pub fn run_trial_with(
    cfg: &TrialConfig,
    scheme: Scheme,
    seed: u64,
    setup: &TrialSetup,
    trace: bool,
) -> Result<TrialOutput, TrialError> {
    let model = &cfg.model;
    let m = model.rotors();
    let planner = Planner::new(model.clone(), cfg.nmpc.clone())?;
    let mut estimator = Estimator::build(cfg, scheme)?;
    let mut estimate = estimator.initial(&model.params);
    let sqp = SqpSettings { max_iter: cfg.nmhpe_max_iter, ..default_sqp_settings() };
    let u_ref = setup.theta_true.hover_thrust(&model.gravity);
    let mask = cfg.disturbance_channels.mask();

    let steps = cfg.steps();
    let mut x = setup.x0;
    let mut window = HorizonWindow::new(cfg.window, cfg.dt, x);
    let mut warm: Option<PlannedTrajectory> = None;
    let mut cost = 0.0;
    let mut diverged = false;
    let mut last_p = x.p.norm();
    let mut est_times = Vec::new();
    let mut nmpc_times = Vec::with_capacity(steps);
    let (mut est_failures, mut fallbacks) = (0, 0);
    let mut rows = trace.then(|| Vec::with_capacity(steps + 1));

    for k in 0..steps {
        let result = match &mut estimator {
            Estimator::None => None,
            Estimator::Lq(lq, st) => {
                let r = lq.estimate(&window, st);
                st.accept(&r);
                let e = RelaxedParams::from_slice(m, &r.params).map(ParameterEstimate::Relaxed);
                Some(e.map(|e| (r.status, r.solve_time, e)))
            }
            Estimator::Nonlinear(st) => {
                let r = estimate_nonlinear(&window, st, &sqp);
                st.accept(&r);
                let e = NominalParams::from_slice(m, &r.params).map(ParameterEstimate::Nominal);
                Some(e.map(|e| (r.status, r.solve_time, e)))
            }
        };
        if let Some(r) = result {
            let (status, time, e) = r?;
            est_times.push(time);
            if status == EstimateStatus::Failed {
                est_failures += 1;
            }
            estimate = e;
        }

        let plan = planner.plan(&x, &estimate, warm.as_ref())?;
        nmpc_times.push(plan.solve_time);
        if plan.status == PlanStatus::Fallback {
            fallbacks += 1;
        }
        let u = apply_first(&plan, model.u_max);
        if let Some(rows) = rows.as_mut() {
            rows.push(TraceRow {
                t: k as f64 * cfg.dt,
                state: x.to_array(),
                input: u.0.clone(),
                estimate: estimate_vector(&estimate),
            });
        }
        cost += cfg.nmpc.stage_cost(&x, u.as_slice(), u_ref);

        let w = setup.noise[k];
        let wd: [f64; STATE_DIM] = std::array::from_fn(|i| if mask[i] { cfg.dt * w[i] } else { 0.0 });
        let next = rk4_step_with_gravity(&x, &u, &setup.theta_true, cfg.dt, &model.gravity)?;
        let next = add_disturbance(&next, &wd, cfg.disturbance_channels);
        if !next.is_finite() || next.p.norm() > cfg.divergence_radius || !cost.is_finite() {
            diverged = true;
            if next.is_finite() {
                last_p = next.p.norm();
            }
            break;
        }
        last_p = next.p.norm();
        let w_rate: [f64; STATE_DIM] = std::array::from_fn(|i| if mask[i] { w[i] } else { 0.0 });
        window.push_step(next, u, w_rate);
        x = next;
        warm = Some(plan);
    }

    if let Some(rows) = rows.as_mut() {
        if !diverged {
            rows.push(TraceRow {
                t: steps as f64 * cfg.dt,
                state: x.to_array(),
                input: vec![f64::NAN; m],
                estimate: estimate_vector(&estimate),
            });
        }
    }

    let record = TrialRecord {
        seed,
        scheme,
        model: model.name.clone(),
        cost: if diverged { cfg.cost_ceiling } else { cost.min(cfg.cost_ceiling) },
        diverged,
        final_position_error: last_p,
        steps: nmpc_times.len(),
        estimator_failures: est_failures,
        planner_fallbacks: fallbacks,
        estimator_times: est_times,
        nmpc_times,
    };
    Ok(TrialOutput { record, trace: rows })
}

// ---------------------------------------------------------------------------
// batteries

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub trial: TrialConfig,
    pub schemes: Vec<Scheme>,
    pub trials: usize,
    /// Trial `i` uses seed `base_seed + i`.
    pub base_seed: u64,
}

impl BatteryConfig {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.trials as u64).map(move |i| self.base_seed.wrapping_add(i))
    }

    pub fn validate(&self) -> Result<(), TrialError> {
        if self.trials == 0 {
            return Err(TrialError::Config("trials must be at least 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(TrialError::Config("at least one scheme is required".into()));
        }
        self.trial.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Battery {
    pub config: BatteryConfig,
    /// Grouped by scheme in config order, seeds ascending within a scheme.
    pub records: Vec<TrialRecord>,
    pub traces: Vec<Option<Vec<TraceRow>>>,
}

/// Runs every (scheme, seed) pair on a pool of `jobs` workers (rayon's
/// default when `None`). Results do not depend on the worker count.
pub fn run_battery(cfg: &BatteryConfig, jobs: Option<usize>, trace: bool) -> Result<Battery, TrialError> {
    cfg.validate()?;
    let seeds: Vec<u64> = cfg.seeds().collect();
    let setups: Vec<TrialSetup> =
        seeds.iter().map(|&s| TrialSetup::draw(&cfg.trial, s)).collect::<Result<_, _>>()?;
    let tasks: Vec<(Scheme, usize)> =
        cfg.schemes.iter().flat_map(|&sc| (0..seeds.len()).map(move |i| (sc, i))).collect();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(|e| TrialError::Pool(e.to_string()))?;
    let outputs: Vec<TrialOutput> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(sc, i)| run_trial_with(&cfg.trial, sc, seeds[i], &setups[i], trace))
            .collect::<Result<_, _>>()
    })?;
    let (records, traces) = outputs.into_iter().map(|o| (o.record, o.trace)).unzip();
    Ok(Battery { config: cfg.clone(), records, traces })
}

// ---------------------------------------------------------------------------
// summaries

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub best: f64,
    pub mean: f64,
    pub median: f64,
    pub worst: f64,
    pub count: usize,
}

impl Stats {
    /// Summation in the given order, so the result is reproducible from any
    /// exact copy of the samples.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self { best: v[0], mean, median, worst: v[n - 1], count: n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub trials: usize,
    pub cost: Stats,
    pub final_position_error: Stats,
    pub diverged: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    pub estimator_failures: usize,
    pub planner_fallbacks: usize,
}

/// Relative mean-cost reduction `1 − cost(scheme) / cost(baseline)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub scheme: Scheme,
    pub baseline: Scheme,
    pub reduction: f64,
}

/// Deterministic battery summary (no wall-clock data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: BatteryConfig,
    pub schemes: Vec<SchemeSummary>,
    pub comparisons: Vec<CostComparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeTiming {
    pub scheme: Scheme,
    /// Over all non-empty-window solves; absent for `none`.
    pub estimator: Option<Stats>,
    pub nmpc: Stats,
}

pub fn summarize(cfg: &BatteryConfig, records: &[RecordRow]) -> Summary {
    let radius = cfg.trial.convergence_radius;
    let schemes: Vec<SchemeSummary> = cfg
        .schemes
        .iter()
        .filter_map(|&sc| {
            let rs: Vec<&RecordRow> = records.iter().filter(|r| r.scheme == sc).collect();
            let cost = Stats::of(rs.iter().map(|r| r.cost))?;
            let fpe = Stats::of(rs.iter().map(|r| r.final_position_error))?;
            let converged = rs.iter().filter(|r| !r.diverged && r.final_position_error < radius).count();
            Some(SchemeSummary {
                scheme: sc,
                trials: rs.len(),
                cost,
                final_position_error: fpe,
                diverged: rs.iter().filter(|r| r.diverged).count(),
                converged,
                convergence_rate: converged as f64 / rs.len() as f64,
                estimator_failures: rs.iter().map(|r| r.estimator_failures).sum(),
                planner_fallbacks: rs.iter().map(|r| r.planner_fallbacks).sum(),
            })
        })
        .collect();
    let mean = |sc: Scheme| schemes.iter().find(|s| s.scheme == sc).map(|s| s.cost.mean);
    let mut comparisons = Vec::new();
    for (scheme, baseline) in [
        (Scheme::LqMhpe, Scheme::None),
        (Scheme::Nmhpe, Scheme::None),
        (Scheme::LqMhpe, Scheme::Nmhpe),
    ] {
        if let (Some(a), Some(b)) = (mean(scheme), mean(baseline)) {
            comparisons.push(CostComparison { scheme, baseline, reduction: 1.0 - a / b });
        }
    }
    Summary { config: cfg.clone(), schemes, comparisons }
}

pub fn timing_summary(cfg: &BatteryConfig, records: &[TrialRecord]) -> Vec<SchemeTiming> {
    cfg.schemes
        .iter()
        .filter_map(|&sc| {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.scheme == sc).collect();
            let nmpc = Stats::of(rs.iter().flat_map(|r| r.nmpc_times.iter().copied()))?;
            let estimator = Stats::of(rs.iter().flat_map(|r| r.estimator_times.iter().skip(1).copied()));
            Some(SchemeTiming { scheme: sc, estimator, nmpc })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// files

/// One row of `records.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub seed: u64,
    pub scheme: Scheme,
    pub model: String,
    pub cost: f64,
    pub diverged: bool,
    pub final_position_error: f64,
    pub steps: usize,
    pub estimator_failures: usize,
    pub planner_fallbacks: usize,
}

impl From<&TrialRecord> for RecordRow {
    fn from(r: &TrialRecord) -> Self {
        Self {
            seed: r.seed,
            scheme: r.scheme,
            model: r.model.clone(),
            cost: r.cost,
            diverged: r.diverged,
            final_position_error: r.final_position_error,
            steps: r.steps,
            estimator_failures: r.estimator_failures,
            planner_fallbacks: r.planner_fallbacks,
        }
    }
}

/// One row of `timings.csv` (seconds; estimator columns empty for `none`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub seed: u64,
    pub scheme: Scheme,
    pub model: String,
    pub estimator_mean: Option<f64>,
    pub estimator_min: Option<f64>,
    pub estimator_max: Option<f64>,
    pub nmpc_mean: f64,
    pub nmpc_min: f64,
    pub nmpc_max: f64,
}

impl From<&TrialRecord> for TimingRow {
    fn from(r: &TrialRecord) -> Self {
        let e = Stats::of(r.estimator_times.iter().skip(1).copied());
        let n = Stats::of(r.nmpc_times.iter().copied()).unwrap_or(Stats {
            best: f64::NAN,
            mean: f64::NAN,
            median: f64::NAN,
            worst: f64::NAN,
            count: 0,
        });
        Self {
            seed: r.seed,
            scheme: r.scheme,
            model: r.model.clone(),
            estimator_mean: e.map(|s| s.mean),
            estimator_min: e.map(|s| s.best),
            estimator_max: e.map(|s| s.worst),
            nmpc_mean: n.mean,
            nmpc_min: n.best,
            nmpc_max: n.worst,
        }
    }
}

pub const RECORDS_FILE: &str = "records.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_SUMMARY_FILE: &str = "timing.json";
pub const TRACES_DIR: &str = "traces";

pub fn write_records(path: &Path, records: &[TrialRecord]) -> Result<(), TrialError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(RecordRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RecordRow>, TrialError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Reads `summary.json`, ignoring any invocation block.
pub fn read_summary(path: &Path) -> Result<Summary, TrialError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_trace(path: &Path, model: &ModelSpec, scheme: Scheme, rows: &[TraceRow]) -> Result<(), TrialError> {
    let m = model.rotors();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=m).map(|i| format!("u{i}")));
    let labels = match scheme {
        Scheme::LqMhpe => RelaxedParams::labels(m),
        _ => NominalParams::labels(m),
    };
    header.extend(labels.iter().map(|l| format!("est_{l}")));
    w.write_record(&header)?;
    for r in rows {
        let fields = std::iter::once(r.t)
            .chain(r.state.iter().copied())
            .chain(r.input.iter().copied())
            .chain(r.estimate.iter().copied())
            .map(|v| v.to_string());
        w.write_record(fields)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    invocation: Option<&'a serde_json::Value>,
    #[serde(flatten)]
    summary: &'a Summary,
}

/// Writes `records.csv`, `timings.csv`, `summary.json`, `timing.json` and,
/// when recorded, `traces/<scheme>/<seed>.csv` under `dir`. `invocation` is
/// embedded verbatim at the top of `summary.json`.
pub fn write_outputs(
    dir: &Path,
    battery: &Battery,
    invocation: Option<&serde_json::Value>,
) -> Result<Summary, TrialError> {
    fs::create_dir_all(dir)?;
    write_records(&dir.join(RECORDS_FILE), &battery.records)?;

    let mut w = csv::Writer::from_path(dir.join(TIMINGS_FILE))?;
    for r in &battery.records {
        w.serialize(TimingRow::from(r))?;
    }
    w.flush()?;

    let rows: Vec<RecordRow> = battery.records.iter().map(RecordRow::from).collect();
    let summary = summarize(&battery.config, &rows);
    let file = SummaryFile { invocation, summary: &summary };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&file)? + "\n")?;
    let timing = timing_summary(&battery.config, &battery.records);
    fs::write(dir.join(TIMING_SUMMARY_FILE), serde_json::to_string_pretty(&timing)? + "\n")?;

    for (rec, trace) in battery.records.iter().zip(&battery.traces) {
        if let Some(rows) = trace {
            let sub = dir.join(TRACES_DIR).join(rec.scheme.as_str());
            fs::create_dir_all(&sub)?;
            write_trace(&sub.join(format!("{}.csv", rec.seed)), &battery.config.trial.model, rec.scheme, rows)?;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(model: ModelSpec) -> TrialConfig {
        TrialConfig { duration: 0.4, ..TrialConfig::for_model(model) }
    }

    #[test]
    fn scheme_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("ekf".parse::<Scheme>().is_err());
    }

    #[test]
    fn table_bounds() {
        let c = TrialConfig::for_model(ModelSpec::crazyflie());
        assert_eq!((c.position_bound, c.velocity_bound, c.steps()), (5.0, 2.5, 500));
        let f = TrialConfig::for_model(ModelSpec::fusion1());
        assert_eq!((f.position_bound, f.velocity_bound), (10.0, 5.0));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = TrialConfig::for_model(ModelSpec::crazyflie());
        assert!(base.validate().is_ok());
        assert!(TrialConfig { dt: 0.03, ..base.clone() }.validate().is_err());
        assert!(TrialConfig { noise_bound: f64::INFINITY, ..base.clone() }.validate().is_err());
        assert!(TrialConfig { param_factors: [1.5, 0.5], ..base.clone() }.validate().is_err());
        assert!(TrialConfig { window: 0, ..base }.validate().is_err());
    }

    #[test]
    fn draws_lie_in_bounds() {
        let cfg = TrialConfig::for_model(ModelSpec::fusion1());
        let bx = cfg.param_box().unwrap();
        for seed in 0..50 {
            let s = TrialSetup::draw(&cfg, seed).unwrap();
            assert!(bx.contains(&s.theta_true.to_vec()));
            assert!((s.x0.q.norm() - 1.0).abs() < 1e-12);
            assert!(s.x0.p.iter().all(|p| p.abs() <= 10.0));
            assert!(s.x0.v.iter().all(|v| v.abs() <= 5.0));
            assert_eq!(s.noise.len(), 500);
            assert!(s.noise.iter().flatten().all(|w| w.abs() <= 2.5));
        }
    }

    #[test]
    fn identity_attitude_flag_keeps_other_draws() {
        let cfg = TrialConfig::for_model(ModelSpec::crazyflie());
        let a = TrialSetup::draw(&cfg, 3).unwrap();
        let b = TrialSetup::draw(&TrialConfig { random_attitude: false, ..cfg }, 3).unwrap();
        assert_eq!(b.x0.q, Quaternion::identity());
        assert_eq!((a.x0.p, a.noise.clone(), a.theta_true.clone()), (b.x0.p, b.noise, b.theta_true));
    }

    #[test]
    fn perfect_model_equilibrium_costs_nothing() {
        let cfg = TrialConfig { noise_bound: 0.0, ..short(ModelSpec::crazyflie()) };
        let setup = TrialSetup {
            theta_true: cfg.model.params.clone(),
            x0: State::hover(),
            noise: vec![[0.0; STATE_DIM]; cfg.steps()],
        };
        let out = run_trial_with(&cfg, Scheme::None, 0, &setup, false).unwrap();
        assert!(out.record.cost < 1e-12, "cost {}", out.record.cost);
        assert!(!out.record.diverged);
        assert!(out.record.estimator_times.is_empty());
        assert_eq!(out.record.nmpc_times.len(), cfg.steps());
    }

    #[test]
    fn times_per_step_and_unit_quaternions() {
        let cfg = short(ModelSpec::crazyflie());
        for scheme in [Scheme::LqMhpe, Scheme::Nmhpe] {
            let out = run_trial(&cfg, scheme, 11, true).unwrap();
            let r = &out.record;
            assert_eq!(r.estimator_times.len(), r.steps);
            assert_eq!(r.nmpc_times.len(), r.steps);
            assert!(r.cost >= 0.0);
            for row in out.trace.unwrap() {
                let q = &row.state[3..7];
                assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nan_true_dynamics_diverge_at_ceiling() {
        let cfg = short(ModelSpec::crazyflie());
        let mut setup = TrialSetup::draw(&cfg, 1).unwrap();
        setup.noise[3][0] = f64::NAN;
        let out = run_trial_with(&cfg, Scheme::None, 1, &setup, false).unwrap();
        assert!(out.record.diverged);
        assert_eq!(out.record.cost, cfg.cost_ceiling);
        assert_eq!(out.record.steps, 4);
        assert!(out.record.final_position_error.is_finite());
    }

    #[test]
    fn stats_of_single_sample() {
        let s = Stats::of([2.5]).unwrap();
        assert_eq!((s.best, s.mean, s.median, s.worst, s.count), (2.5, 2.5, 2.5, 2.5, 1));
        assert_eq!(Stats::of([1.0, 4.0, 2.0, 3.0]).unwrap().median, 2.5);
        assert!(Stats::of(std::iter::empty()).is_none());
    }
}
