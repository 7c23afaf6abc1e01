//! Moving-horizon parameter estimation over a sliding window of measured
//! states, inputs and disturbances.
//!
//! Both estimators minimize `‖p − p̄‖²_P + ρ_w Σⱼ ‖w̃ⱼ − wⱼ‖²` over a box,
//! where `w̃ⱼ` is the disturbance that makes the model reproduce the
//! measured transition `j`. The slack disturbances are eliminated in closed
//! form, leaving the parameters as the only decision variables:
//!
//! - [`estimate_nonlinear`] uses RK4 steps of the physical model and the
//!   SQP solver (a nonlinear least-squares problem in `θ`);
//! - [`estimate_lq`] uses forward-Euler steps of the affine relaxed model,
//!   so the problem is a convex QP in `ϑ`.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{nominal_rate, rk4_kernel, ControlInput, NominalParams, State, GRAVITY, STATE_DIM};
use crate::nlp::{solve_nlp, NlpProblem, SqpSettings};
use crate::qp::{QpProblem, QpSettings, QpSolver};
use crate::relaxation::{drift, input_matrix, relax, transform_bounds, ParamBox, ParamSpace, RelaxationError};
use crate::scalar::Scalar;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_DISTURBANCE_WEIGHT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("nominal parameter {index} is zero; the order-of-magnitude weight is undefined")]
    ZeroNominal { index: usize },
    #[error("parameter vector has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("prior lies outside the parameter box")]
    PriorOutsideBox,
    #[error(transparent)]
    Relaxation(#[from] RelaxationError),
}

/// Diagonal weights `Pᵢᵢ = 10^(−⌊log₁₀|θ₀ᵢ|⌋)`.
pub fn tuning_weights(theta0: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    theta0
        .iter()
        .enumerate()
        .map(|(index, &t)| {
            if t == 0.0 || !t.is_finite() {
                Err(EstimatorError::ZeroNominal { index })
            } else {
                Ok(10f64.powi(-(t.abs().log10().floor() as i32)))
            }
        })
        .collect()
}

/// Sliding window of the last `capacity` transitions.
#[derive(Clone, Debug)]
pub struct HorizonWindow {
    capacity: usize,
    dt: f64,
    states: VecDeque<State>,
    inputs: VecDeque<ControlInput>,
    disturbances: VecDeque<[f64; STATE_DIM]>,
}

impl HorizonWindow {
    /// Empty window anchored at the measured state `x0`.
    pub fn new(capacity: usize, dt: f64, x0: State) -> Self {
        assert!(capacity >= 1, "window must hold at least one transition");
        let mut states = VecDeque::with_capacity(capacity + 1);
        states.push_back(x0);
        Self {
            capacity,
            dt,
            states,
            inputs: VecDeque::with_capacity(capacity),
            disturbances: VecDeque::with_capacity(capacity),
        }
    }

    /// Appends the transition driven by `u` (with measured disturbance rate
    /// `w`) that ended in `x_next`, evicting the oldest once full.
    pub fn push_step(&mut self, x_next: State, u: ControlInput, w: [f64; STATE_DIM]) {
        self.states.push_back(x_next);
        self.inputs.push_back(u);
        self.disturbances.push_back(w);
        if self.inputs.len() > self.capacity {
            self.states.pop_front();
            self.inputs.pop_front();
            self.disturbances.pop_front();
        }
    }

    /// Number of stored transitions.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.states.iter()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &ControlInput> {
        self.inputs.iter()
    }

    pub fn disturbances(&self) -> impl Iterator<Item = &[f64; STATE_DIM]> {
        self.disturbances.iter()
    }

    /// Transition `j`: `(x_j, u_j, w_j, x_{j+1})`.
    fn transition(&self, j: usize) -> (&State, &ControlInput, &[f64; STATE_DIM], &State) {
        (&self.states[j], &self.inputs[j], &self.disturbances[j], &self.states[j + 1])
    }
}

/// Prior, weights and box of one estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub prior: Vec<f64>,
    pub weights: Vec<f64>,
    pub bounds: ParamBox,
    pub disturbance_weight: f64,
}

impl EstimatorState {
    pub fn new(
        prior: Vec<f64>,
        weights: Vec<f64>,
        bounds: ParamBox,
        disturbance_weight: f64,
    ) -> Result<Self, EstimatorError> {
        let p = bounds.dim();
        for v in [&prior, &weights] {
            if v.len() != p {
                return Err(EstimatorError::Dimension { expected: p, got: v.len() });
            }
        }
        if !bounds.contains(&prior) {
            return Err(EstimatorError::PriorOutsideBox);
        }
        Ok(Self { prior, weights, bounds, disturbance_weight })
    }

    /// NMHPE state in `θ`-space, prior at the nominal model.
    pub fn nominal(theta0: &NominalParams, bounds: ParamBox, disturbance_weight: f64) -> Result<Self, EstimatorError> {
        let prior = theta0.to_vec();
        let weights = tuning_weights(&prior)?;
        Self::new(prior, weights, bounds, disturbance_weight)
    }

    /// LQ-MHPE state in `ϑ`-space: relaxed nominal prior, the heuristic
    /// applied to the relaxed nominal values, and the transformed box.
    pub fn relaxed(theta0: &NominalParams, bounds: &ParamBox, disturbance_weight: f64) -> Result<Self, EstimatorError> {
        let prior = relax(theta0).map_err(RelaxationError::from)?.to_vec();
        let weights = tuning_weights(&prior)?;
        let vbox = transform_bounds(bounds, theta0)?;
        Self::new(prior, weights, vbox, disturbance_weight)
    }

    /// Adopts a successful estimate as the next prior.
    pub fn accept(&mut self, result: &EstimateResult) {
        if result.status == EstimateStatus::Solved {
            self.prior.clone_from(&result.params);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateStatus {
    Solved,
    /// Solver failure; the prior is returned unchanged.
    Failed,
    /// Empty window; the prior is returned unchanged.
    Skipped,
}

#[derive(Clone, Debug)]
pub struct EstimateResult {
    pub params: Vec<f64>,
    pub objective: f64,
    pub status: EstimateStatus,
    pub iterations: usize,
    pub solve_time: f64,
}

fn unchanged(est: &EstimatorState, status: EstimateStatus, start: Instant) -> EstimateResult {
    EstimateResult {
        params: est.prior.clone(),
        objective: f64::NAN,
        status,
        iterations: 0,
        solve_time: start.elapsed().as_secs_f64(),
    }
}

fn prior_cost(est: &EstimatorState, p: &[f64]) -> f64 {
    p.iter().zip(&est.prior).zip(&est.weights).map(|((x, b), w)| w * (x - b) * (x - b)).sum()
}

// ---------------------------------------------------------------------------
// LQ-MHPE

/// Per-transition data of the Euler model: `𝒢ⱼ` and `rⱼ = (x_{j+1} − x_j)/dt − ℱ(x_j) − w_j`,
/// so that `w̃ⱼ − wⱼ = rⱼ − 𝒢ⱼϑ`.
fn lq_terms(win: &HorizonWindow) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    (0..win.len())
        .map(|j| {
            let (x, u, w, xn) = win.transition(j);
            let g = input_matrix(x, u);
            let f = drift(x);
            let r = DVector::from_fn(STATE_DIM, |i, _| (xn.to_vector()[i] - x.to_vector()[i]) / win.dt - f[i] - w[i]);
            (g, r)
        })
        .collect()
}

/// LQ-MHPE objective at `vartheta`.
pub fn lq_objective(win: &HorizonWindow, est: &EstimatorState, vartheta: &[f64]) -> f64 {
    let th = DVector::from_column_slice(vartheta);
    let fit: f64 = lq_terms(win).iter().map(|(g, r)| (r - g * &th).norm_squared()).sum();
    prior_cost(est, vartheta) + est.disturbance_weight * fit
}

/// Assembles the LQ-MHPE QP `min ½ϑᵀHϑ + qᵀϑ` over the relaxed box.
pub fn lq_problem(win: &HorizonWindow, est: &EstimatorState) -> QpProblem {
    let p = est.prior.len();
    let rho = est.disturbance_weight;
    let mut h = DMatrix::from_diagonal(&DVector::from_column_slice(&est.weights));
    let mut q = -DVector::from_iterator(p, est.weights.iter().zip(&est.prior).map(|(w, b)| w * b));
    for (g, r) in lq_terms(win) {
        h.gemm_tr(rho, &g, &g, 1.0);
        q.gemv_tr(-rho, &g, &r, 1.0);
    }
    let h = (&h + h.transpose()) * 0.5;
    QpProblem::with_box(
        h * 2.0,
        q * 2.0,
        DVector::from_column_slice(&est.bounds.lower),
        DVector::from_column_slice(&est.bounds.upper),
    )
    .expect("estimator data is finite and the box is ordered")
}

/// Unconstrained minimizer clipped to the box, with the bound multipliers
/// it implies; exact whenever it guesses the active set.
fn projected_minimizer(prob: &QpProblem) -> Option<(DVector<f64>, DVector<f64>)> {
    if prob.a != DMatrix::identity(prob.num_vars(), prob.num_vars()) {
        return None;
    }
    let x = prob.p.clone().cholesky()?.solve(&(-&prob.q));
    let x = DVector::from_fn(x.len(), |i, _| x[i].clamp(prob.l[i], prob.u[i]));
    let g = &prob.p * &x + &prob.q;
    let y = DVector::from_fn(x.len(), |i, _| if x[i] == prob.l[i] || x[i] == prob.u[i] { -g[i] } else { 0.0 });
    Some((x, y))
}

/// Reusable LQ-MHPE solver.
#[derive(Clone, Debug)]
pub struct LqEstimator {
    qp: QpSolver,
}

impl Default for LqEstimator {
    fn default() -> Self {
        Self::new(QpSettings::with_tolerance(1e-8))
    }
}

impl LqEstimator {
    pub fn new(settings: QpSettings) -> Self {
        Self { qp: QpSolver::new(settings) }
    }

    pub fn estimate(&mut self, win: &HorizonWindow, est: &EstimatorState) -> EstimateResult {
        let start = Instant::now();
        if win.is_empty() {
            return unchanged(est, EstimateStatus::Skipped, start);
        }
        debug_assert_eq!(est.bounds.space, ParamSpace::Relaxed);
        let prob = lq_problem(win, est);
        match projected_minimizer(&prob) {
            Some((x, y)) => self.qp.set_warm_start(x, y),
            None => self.qp.clear_warm_start(),
        }
        let sol = self.qp.solve(&prob);
        if !sol.is_solved() {
            return unchanged(est, EstimateStatus::Failed, start);
        }
        let mut params: Vec<f64> = sol.x.iter().copied().collect();
        est.bounds.clamp(&mut params);
        let solve_time = start.elapsed().as_secs_f64();
        EstimateResult {
            objective: lq_objective(win, est, &params),
            params,
            status: EstimateStatus::Solved,
            iterations: sol.iterations,
            solve_time,
        }
    }
}

/// One-shot LQ-MHPE estimate.
pub fn estimate_lq(win: &HorizonWindow, est: &EstimatorState) -> EstimateResult {
    LqEstimator::default().estimate(win, est)
}

// ---------------------------------------------------------------------------
// NMHPE

/// Nonlinear least squares in scaled variables `zᵢ = θᵢ · Pᵢᵢ`.
struct NmhpeProblem<'a> {
    win: &'a HorizonWindow,
    est: &'a EstimatorState,
    sqrt_w: Vec<f64>,
    sqrt_rho: f64,
    xs: Vec<[f64; STATE_DIM]>,
}

impl<'a> NmhpeProblem<'a> {
    fn new(win: &'a HorizonWindow, est: &'a EstimatorState) -> Self {
        Self {
            win,
            est,
            sqrt_w: est.weights.iter().map(|w| w.sqrt()).collect(),
            sqrt_rho: est.disturbance_weight.sqrt(),
            xs: win.states.iter().map(|s| s.to_array()).collect(),
        }
    }

    fn to_theta(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.est.weights).map(|(z, w)| z / w).collect()
    }

    fn to_z(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.est.weights).map(|(t, w)| t * w).collect()
    }
}

impl NlpProblem for NmhpeProblem<'_> {
    fn num_vars(&self) -> usize {
        self.est.prior.len()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.to_z(&self.est.bounds.lower), self.to_z(&self.est.bounds.upper))
    }

    fn is_least_squares(&self) -> bool {
        true
    }

    fn num_residuals(&self) -> usize {
        self.num_vars() + STATE_DIM * self.win.len()
    }

    fn residuals<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let theta: Vec<S> = z.iter().zip(&self.est.weights).map(|(&z, &w)| z / w).collect();
        let mut out = Vec::with_capacity(self.num_residuals());
        for i in 0..theta.len() {
            out.push((theta[i] - self.est.prior[i]) * self.sqrt_w[i]);
        }
        let dt = self.win.dt;
        for j in 0..self.win.len() {
            let x: [S; STATE_DIM] = self.xs[j].map(S::from_f64);
            let u: Vec<S> = self.win.inputs[j].as_slice().iter().map(|&v| S::from_f64(v)).collect();
            let next = rk4_kernel(&x, dt, |s| nominal_rate(s, &u, &theta, &GRAVITY));
            let w = &self.win.disturbances[j];
            for i in 0..STATE_DIM {
                out.push(-(next[i] - self.xs[j + 1][i] + w[i] * dt) * (self.sqrt_rho / dt));
            }
        }
        out
    }
}

/// NMHPE objective at `theta`.
pub fn nonlinear_objective(win: &HorizonWindow, est: &EstimatorState, theta: &[f64]) -> f64 {
    let prob = NmhpeProblem::new(win, est);
    prob.residuals(&prob.to_z(theta)).iter().map(|r| r * r).sum()
}

pub fn default_sqp_settings() -> SqpSettings {
    SqpSettings { tol: 1e-8, max_iter: 50, ..Default::default() }
}

pub fn estimate_nonlinear(win: &HorizonWindow, est: &EstimatorState, settings: &SqpSettings) -> EstimateResult {
    let start = Instant::now();
    if win.is_empty() {
        return unchanged(est, EstimateStatus::Skipped, start);
    }
    debug_assert_eq!(est.bounds.space, ParamSpace::Nominal);
    let prob = NmhpeProblem::new(win, est);
    let z0 = prob.to_z(&est.prior);
    let sol = match solve_nlp(&prob, &z0, settings) {
        Ok(s) if s.converged() && s.x.iter().all(|v| v.is_finite()) => s,
        _ => return unchanged(est, EstimateStatus::Failed, start),
    };
    let mut params = prob.to_theta(&sol.x);
    est.bounds.clamp(&mut params);
    let solve_time = start.elapsed().as_secs_f64();
    EstimateResult {
        objective: nonlinear_objective(win, est, &params),
        params,
        status: EstimateStatus::Solved,
        iterations: sol.iterations,
        solve_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelSpec;

    #[test]
    fn tuning_heuristic() {
        let w = tuning_weights(&[2.70e-2, 1.44e-5, 1.0, -0.0283, 250.0]).unwrap();
        assert_eq!(w, vec![100.0, 1e5, 1.0, 100.0, 1e-2]);
        assert!(matches!(tuning_weights(&[1.0, 0.0]), Err(EstimatorError::ZeroNominal { index: 1 })));
    }

    #[test]
    fn window_fifo() {
        let mut win = HorizonWindow::new(3, 0.02, State::hover());
        assert!(win.is_empty());
        let u = ControlInput::uniform(4, 0.1);
        win.push_step(State::hover(), u.clone(), [0.0; STATE_DIM]);
        assert_eq!(win.len(), 1);
        for k in 1..=5 {
            let mut x = State::hover();
            x.p.x = k as f64;
            win.push_step(x, ControlInput::uniform(4, k as f64), [0.0; STATE_DIM]);
        }
        assert_eq!(win.len(), 3);
        assert!(win.is_full());
        let px: Vec<f64> = win.states().map(|s| s.p.x).collect();
        assert_eq!(px, vec![2.0, 3.0, 4.0, 5.0]);
        let us: Vec<f64> = win.inputs().map(|u| u.0[0]).collect();
        assert_eq!(us, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn empty_window_keeps_prior() {
        let model = ModelSpec::crazyflie();
        let bx = ParamBox::from_factors(&model.params, 0.5, 1.5).unwrap();
        let est = EstimatorState::relaxed(&model.params, &bx, 1e6).unwrap();
        let win = HorizonWindow::new(10, 0.02, State::hover());
        let r = estimate_lq(&win, &est);
        assert_eq!(r.status, EstimateStatus::Skipped);
        assert_eq!(r.params, est.prior);
    }

    #[test]
    fn prior_must_lie_in_box() {
        let model = ModelSpec::crazyflie();
        let bx = ParamBox::from_factors(&model.params, 1.1, 1.5).unwrap();
        assert!(matches!(EstimatorState::nominal(&model.params, bx, 1e6), Err(EstimatorError::PriorOutsideBox)));
    }
}
