//! Self-checks against independent oracles: the affine form against the
//! nonlinear dynamics, AD against finite differences, the QP solver against
//! active-set enumeration, estimator fixed points, box soundness and the
//! estimator solve-time ratio.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attitude::Quaternion;
use crate::dynamics::{
    derivative, nominal_rate, rk4_kernel, rk4_step, ControlInput, ModelSpec, NominalParams, State, GRAVITY,
    STATE_DIM,
};
use crate::mhpe::{
    default_sqp_settings, estimate_lq, estimate_nonlinear, EstimateStatus, EstimatorState, HorizonWindow,
    LqEstimator,
};
use crate::nlp::derivatives::max_column_relative_error;
use crate::nlp::{jacobian, DerivativeMode, VectorFunction};
use crate::qp::{self, QpProblem};
use crate::relaxation::{affine_euler_step, drift, input_matrix, relax, transform_bounds, ParamBox};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst measured value of the checked quantity.
    pub measured: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub elapsed: f64,
    pub time_limit: Option<f64>,
    pub detail: String,
}

impl Check {
    fn new(name: &str, measured: f64, tolerance: f64, samples: usize, start: Instant, limit: Option<f64>) -> Self {
        let elapsed = start.elapsed().as_secs_f64();
        let passed = measured <= tolerance && limit.is_none_or(|l| elapsed <= l);
        Self {
            name: name.to_string(),
            passed,
            measured,
            tolerance,
            samples,
            elapsed,
            time_limit: limit,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: String) -> Self {
        self.detail = detail;
        self
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} <= {:.1e} over {} samples in {:.2} s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.samples,
            self.elapsed
        )?;
        if let Some(l) = self.time_limit {
            write!(f, " (limit {l} s)")?;
        }
        if !self.detail.is_empty() {
            write!(f, "; {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ValidationOptions {
    pub quick: bool,
    pub seed: u64,
    /// Negates `𝒢` inside the affine-equivalence check (a negative control).
    pub corrupt_input_matrix: bool,
}

pub fn models() -> [ModelSpec; 2] {
    [ModelSpec::crazyflie(), ModelSpec::fusion1()]
}

/// A state with uniform attitude and bounded position, velocity and rate.
pub fn random_state(rng: &mut impl Rng, pos: f64, vel: f64, rate: f64) -> State {
    let q = loop {
        let q = Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            break q.normalize();
        }
    };
    let mut v3 = |s: f64| Vector3::new(rng.gen_range(-s..=s), rng.gen_range(-s..=s), rng.gen_range(-s..=s));
    State { p: v3(pos), q, v: v3(vel), omega: v3(rate) }
}

pub fn random_input(rng: &mut impl Rng, model: &ModelSpec) -> ControlInput {
    ControlInput((0..model.rotors()).map(|_| rng.gen_range(0.0..=model.u_max)).collect())
}

pub fn random_params(rng: &mut impl Rng, bx: &ParamBox, m: usize) -> NominalParams {
    let v: Vec<f64> = bx.lower.iter().zip(&bx.upper).map(|(l, u)| rng.gen_range(*l..=*u)).collect();
    NominalParams::from_slice(m, &v).expect("box dimension")
}

/// `max |ℱ(x) + 𝒢(x,u)·relax(θ) − f(x,u,θ)|` over random states, inputs and
/// parameters in the factor box, for each model.
pub fn affine_equivalence(samples: usize, seed: u64, corrupt: bool) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for model in models() {
        let bx = ParamBox::from_factors(&model.params, 0.5, 1.5).expect("factor box");
        for _ in 0..samples {
            let theta = random_params(&mut rng, &bx, model.rotors());
            let x = random_state(&mut rng, 10.0, 5.0, 5.0);
            let u = random_input(&mut rng, &model);
            let vt = DVector::from_vec(relax(&theta).expect("positive params").to_vec());
            let mut g = input_matrix(&x, &u);
            if corrupt {
                g = -g;
            }
            let lhs = drift(&x) + g * vt;
            let rhs = derivative(&x, &u, &theta).expect("valid params");
            worst = worst.max((lhs - rhs).amax());
        }
    }
    Check::new("affine_equivalence", worst, 1e-10, 2 * samples, start, Some(5.0))
        .with_detail("max abs error, both models".into())
}

/// RK4 step of the physical model as a function of `[x, u, θ]`.
struct Rk4Map {
    m: usize,
    dt: f64,
}

impl VectorFunction for Rk4Map {
    fn input_dim(&self) -> usize {
        STATE_DIM + self.m + 7 + 3 * self.m
    }

    fn output_dim(&self) -> usize {
        STATE_DIM
    }

    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let x: [S; STATE_DIM] = std::array::from_fn(|i| z[i]);
        let u = &z[STATE_DIM..STATE_DIM + self.m];
        let th = &z[STATE_DIM + self.m..];
        rk4_kernel(&x, self.dt, |s| nominal_rate(s, u, th, &GRAVITY)).to_vec()
    }
}

/// Column-wise relative error of forward-mode AD against central
/// differences for the RK4 map in `(x, u, θ)`.
pub fn gradient_suite(points: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..points {
        let model = &models()[k % 2];
        let bx = ParamBox::from_factors(&model.params, 0.5, 1.5).expect("factor box");
        let theta = random_params(&mut rng, &bx, model.rotors());
        let x = random_state(&mut rng, 5.0, 2.5, 2.5);
        let u = random_input(&mut rng, model);
        let mut z = x.to_array().to_vec();
        z.extend_from_slice(u.as_slice());
        z.extend(theta.to_vec());
        let f = Rk4Map { m: model.rotors(), dt: 0.02 };
        let ad = jacobian(&f, &z, DerivativeMode::ForwardAd).expect("finite");
        // relative steps so that tiny parameters are perturbed proportionally
        let mut fd = DMatrix::zeros(STATE_DIM, z.len());
        for j in 0..z.len() {
            let h = 1e-6 * z[j].abs().max(if j < STATE_DIM + model.rotors() { 1e-2 } else { 0.0 });
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += h;
            zm[j] -= h;
            let (fp, fm) = (f.eval(&zp), f.eval(&zm));
            for i in 0..STATE_DIM {
                fd[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        worst = worst.max(max_column_relative_error(&ad, &fd, 1e-6));
    }
    Check::new("gradient_suite", worst, 1e-5, points, start, Some(30.0))
        .with_detail("column-wise relative error of AD vs central differences".into())
}

/// Exact minimizer of `½xᵀPx + qᵀx` s.t. `Ax ≤ b` by enumerating working sets.
pub fn enumerate_active_sets(p: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let (n, m) = (q.len(), b.len());
    assert!(m < 31, "enumeration limited to 30 rows");
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if rows.len() > n {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(p);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-q));
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = a[(i, j)];
                kkt[(j, n + r)] = a[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let lam = sol.rows(n, k);
        let feasible = (a * &x - b).iter().all(|v| *v <= 1e-9 * (1.0 + b.amax()));
        if !feasible || lam.iter().any(|l| *l < -1e-9) || !x.iter().all(|v| v.is_finite()) {
            continue;
        }
        let f = 0.5 * x.dot(&(p * &x)) + q.dot(&x);
        if best.as_ref().is_none_or(|(fb, _)| f < *fb) {
            best = Some((f, x));
        }
    }
    best.map(|(_, x)| x)
}

/// ADMM against active-set enumeration on random strictly convex QPs with
/// up to 12 inequality rows.
pub fn qp_oracle(problems: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..problems {
        let n = rng.gen_range(2..=6);
        let m = rng.gen_range(1..=12);
        let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let p = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        // feasible by construction: a random point satisfies every row
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let b = &a * &x0 + DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0));
        let oracle = enumerate_active_sets(&p, &q, &a, &b).expect("feasible strictly convex QP");
        let prob = QpProblem::new(p, q, a, DVector::from_element(m, f64::NEG_INFINITY), b).expect("valid QP");
        let sol = qp::solve(&prob, 1e-9, 20_000);
        if !sol.is_solved() {
            failures += 1;
            worst = f64::INFINITY;
            continue;
        }
        worst = worst.max((&sol.x - &oracle).amax());
    }
    Check::new("qp_oracle", worst, 1e-6, problems, start, Some(60.0))
        .with_detail(format!("max abs deviation from enumeration, {failures} unsolved"))
}

/// Zero-noise windows generated by the estimator's own model, prior at the
/// generating parameters.
fn fixed_point_window(
    rng: &mut impl Rng,
    model: &ModelSpec,
    len: usize,
    dt: f64,
    step: impl Fn(&State, &ControlInput) -> State,
) -> HorizonWindow {
    let mut x = random_state(rng, 2.0, 1.0, 2.0);
    let mut win = HorizonWindow::new(len, dt, x);
    let uh = model.hover_thrust();
    for _ in 0..len {
        let u = ControlInput((0..model.rotors()).map(|_| uh * rng.gen_range(0.6..1.4)).collect());
        x = step(&x, &u);
        win.push_step(x, u, [0.0; STATE_DIM]);
    }
    win
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1e-12)).fold(0.0, f64::max)
}

/// Both estimators return the generating parameters on their own
/// zero-noise windows, `cases` seeded cases each.
pub fn estimator_fixed_points(cases: usize, seed: u64) -> Vec<Check> {
    let dt = 0.02;
    let mut out = Vec::new();
    for nonlinear in [false, true] {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + nonlinear as u64);
        let mut worst: f64 = 0.0;
        let mut solved = 0;
        for k in 0..cases {
            let model = &models()[k % 2];
            let bx = ParamBox::from_factors(&model.params, 0.5, 1.5).expect("factor box");
            let theta = random_params(&mut rng, &bx, model.rotors());
            let r = if nonlinear {
                let mut est = EstimatorState::nominal(&model.params, bx, 1e6).expect("estimator");
                est.prior = theta.to_vec();
                let win = fixed_point_window(&mut rng, model, 10, dt, |x, u| rk4_step(x, u, &theta, dt).expect("step"));
                estimate_nonlinear(&win, &est, &default_sqp_settings())
            } else {
                let mut est = EstimatorState::relaxed(&model.params, &bx, 1e6).expect("estimator");
                let vt = relax(&theta).expect("positive params");
                est.prior = vt.to_vec();
                let win =
                    fixed_point_window(&mut rng, model, 10, dt, |x, u| affine_euler_step(x, u, &vt, &[0.0; STATE_DIM], dt));
                estimate_lq(&win, &est)
            };
            let truth = if nonlinear { theta.to_vec() } else { relax(&theta).expect("positive").to_vec() };
            if r.status == EstimateStatus::Solved {
                solved += 1;
                worst = worst.max(max_rel(&r.params, &truth));
            } else {
                worst = f64::INFINITY;
            }
        }
        let name = if nonlinear { "fixed_point_nmhpe" } else { "fixed_point_lq_mhpe" };
        out.push(
            Check::new(name, worst, 1e-6, cases, start, None)
                .with_detail(format!("max relative parameter error, {solved}/{cases} solved")),
        );
    }
    out
}

/// `relax(θ)` stays inside the transformed box for uniform `θ` in the
/// factor box of each model.
pub fn bound_soundness(samples: usize, seed: u64) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    for model in models() {
        let bx = ParamBox::from_factors(&model.params, 0.5, 1.5).expect("factor box");
        let vbox = transform_bounds(&bx, &model.params).expect("transform");
        for _ in 0..samples {
            let theta = random_params(&mut rng, &bx, model.rotors());
            if !vbox.contains(&relax(&theta).expect("positive").to_vec()) {
                violations += 1;
            }
        }
    }
    Check::new("bound_soundness", violations as f64, 0.0, 2 * samples, start, None)
        .with_detail("violations of the transformed box".into())
}

/// Mean LQ-MHPE over mean NMHPE solve time on paired noisy Crazyflie
/// windows drawn from the true dynamics at random parameters.
pub fn solve_time_ratio(windows: usize, seed: u64) -> Check {
    let start = Instant::now();
    let model = ModelSpec::crazyflie();
    let dt = 0.02;
    let bx = ParamBox::from_factors(&model.params, 0.5, 1.5).expect("factor box");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut t_lq, mut t_nl) = (0.0, 0.0);
    let (mut ok_lq, mut ok_nl) = (0, 0);
    for _ in 0..windows {
        let theta = random_params(&mut rng, &bx, model.rotors());
        let mut x = random_state(&mut rng, 5.0, 2.5, 2.5);
        let mut win = HorizonWindow::new(10, dt, x);
        for _ in 0..10 {
            let u = ControlInput((0..4).map(|_| model.hover_thrust() * rng.gen_range(0.6..1.4)).collect());
            let w: [f64; STATE_DIM] =
                std::array::from_fn(|i| if (3..7).contains(&i) { 0.0 } else { rng.gen_range(-2.5..=2.5) });
            let mut a = rk4_step(&x, &u, &theta, dt).expect("step").to_array();
            for i in 0..STATE_DIM {
                a[i] += dt * w[i];
            }
            x = State::from_array(&a);
            win.push_step(x, u, w);
        }
        let lq_state = EstimatorState::relaxed(&model.params, &bx, 1e6).expect("estimator");
        let nl_state = EstimatorState::nominal(&model.params, bx.clone(), 1e6).expect("estimator");
        let r = LqEstimator::default().estimate(&win, &lq_state);
        t_lq += r.solve_time;
        ok_lq += (r.status == EstimateStatus::Solved) as usize;
        let r = estimate_nonlinear(&win, &nl_state, &default_sqp_settings());
        t_nl += r.solve_time;
        ok_nl += (r.status == EstimateStatus::Solved) as usize;
    }
    let (mean_lq, mean_nl) = (t_lq / windows as f64, t_nl / windows as f64);
    Check::new("solve_time_ratio", mean_lq / mean_nl, 0.2, windows, start, Some(600.0)).with_detail(format!(
        "mean LQ-MHPE {mean_lq:.3e} s vs NMHPE {mean_nl:.3e} s, solved {ok_lq}/{ok_nl} of {windows}"
    ))
}

/// Every oracle suite, at reduced sample counts when `quick`.
pub fn run_all(opts: &ValidationOptions) -> Vec<Check> {
    let s = opts.seed;
    let (eq, grad, qps, fp, snd, tr) =
        if opts.quick { (1_000, 20, 40, 10, 10_000, 20) } else { (10_000, 100, 200, 50, 100_000, 100) };
    let mut out = vec![
        affine_equivalence(eq, s, opts.corrupt_input_matrix),
        gradient_suite(grad, s + 1),
        qp_oracle(qps, s + 2),
    ];
    out.extend(estimator_fixed_points(fp, s + 3));
    out.push(bound_soundness(snd, s + 5));
    out.push(solve_time_ratio(tr, s + 6));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_solves_a_known_qp() {
        // min ½‖x‖² − x₁ − x₂  s.t. x₁ + x₂ ≤ 1  →  x = (½, ½)
        let p = DMatrix::identity(2, 2);
        let q = DVector::from_vec(vec![-1.0, -1.0]);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0]);
        let x = enumerate_active_sets(&p, &q, &a, &b).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn corrupted_input_matrix_fails() {
        assert!(affine_equivalence(50, 0, false).passed);
        assert!(!affine_equivalence(50, 0, true).passed);
    }

    #[test]
    fn check_line_format() {
        let c = Check::new("x", 1e-12, 1e-10, 3, Instant::now(), None);
        assert!(c.to_string().starts_with("PASS x: 1.000e-12 <= 1.0e-10 over 3 samples"));
    }
}
