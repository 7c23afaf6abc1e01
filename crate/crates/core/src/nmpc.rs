//! Receding-horizon trajectory optimization.
//!
//! The planner transcribes the horizon by multiple shooting over RK4 steps of
//! the model at the current parameter estimate and solves it with
//! Gauss-Newton SQP. Each QP is condensed onto the input increments (state
//! increments are eliminated through the linearized dynamics), leaving a
//! dense QP with input boxes. Steps are globalized on `J + ν‖defects‖₁`, and
//! the returned plan is a forward rollout of the final inputs so it is
//! dynamically consistent.

use std::time::Instant;

use nalgebra::{Const, DMatrix, DVector, Dyn, OMatrix, SMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attitude::Quaternion;
use crate::dynamics::{ControlInput, DynamicsError, ModelSpec, NominalParams, State, StateVector, STATE_DIM};
use crate::nlp::{jacobian, DerivativeMode, VectorFunction};
use crate::qp::solve_box;
use crate::relaxation::{affine_rate, relax, RelaxedParams};
use crate::scalar::Scalar;

type Mat13 = SMatrix<f64, STATE_DIM, STATE_DIM>;
type InputMat = OMatrix<f64, Const<STATE_DIM>, Dyn>;

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error("invalid NMPC config: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Parameter estimate handed to the planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParameterEstimate {
    Nominal(NominalParams),
    Relaxed(RelaxedParams),
}

impl ParameterEstimate {
    pub fn relaxed(&self) -> Result<RelaxedParams, DynamicsError> {
        match self {
            Self::Nominal(t) => relax(t),
            Self::Relaxed(v) => Ok(v.clone()),
        }
    }

    pub fn rotors(&self) -> usize {
        match self {
            Self::Nominal(t) => t.rotors(),
            Self::Relaxed(v) => v.rotors(),
        }
    }

    /// Per-rotor hover thrust implied by the estimated mass.
    pub fn hover_thrust(&self, gravity: &[f64; 3]) -> f64 {
        match self {
            Self::Nominal(t) => t.hover_thrust(gravity),
            Self::Relaxed(v) => v.hover_thrust(gravity),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of the stage state weight.
    pub q_diag: Vec<f64>,
    /// Terminal weight as a multiple of the stage weight.
    pub terminal_factor: f64,
    /// Per-rotor input weight.
    pub r_weight: f64,
    pub max_iter: usize,
    /// Stop once the max-norm input increment falls below `tol · u_max`.
    pub tol: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        let mut q = vec![10.0; 3];
        q.extend([20.0; 4]);
        q.extend([1.0; 3]);
        q.extend([0.1; 3]);
        Self {
            horizon: 25,
            dt: 0.02,
            q_diag: q,
            terminal_factor: 10.0,
            r_weight: 0.1,
            max_iter: 10,
            tol: 1e-3,
            qp_tol: 1e-10,
            qp_max_iter: 200,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), NmpcError> {
        let bad = |m: &str| Err(NmpcError::Config(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.q_diag.len() != STATE_DIM {
            return bad("q_diag must have 13 entries");
        }
        if self.q_diag.iter().any(|q| !(*q >= 0.0 && q.is_finite())) {
            return bad("q_diag entries must be finite and nonnegative");
        }
        if !(self.terminal_factor >= 0.0 && self.terminal_factor.is_finite()) {
            return bad("terminal_factor must be nonnegative");
        }
        if !(self.r_weight >= 0.0 && self.r_weight.is_finite()) {
            return bad("r_weight must be nonnegative");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        Ok(())
    }

    /// Weighted stage cost `‖x − x̄‖²_Q + ‖u − ū‖²_R` with x̄ the origin at
    /// identity attitude, the quaternion taken in the identity's hemisphere.
    pub fn stage_cost(&self, x: &State, u: &[f64], u_ref: f64) -> f64 {
        let e = state_error(&x.to_vector());
        let sx: f64 = (0..STATE_DIM).map(|i| self.q_diag[i] * e[i] * e[i]).sum();
        let su: f64 = u.iter().map(|ui| (ui - u_ref) * (ui - u_ref)).sum();
        sx + self.r_weight * su
    }

    pub fn terminal_cost(&self, x: &State) -> f64 {
        let e = state_error(&x.to_vector());
        self.terminal_factor * (0..STATE_DIM).map(|i| self.q_diag[i] * e[i] * e[i]).sum::<f64>()
    }
}

/// `x − x̄` with the quaternion flipped into the reference hemisphere.
fn state_error(x: &StateVector) -> StateVector {
    let mut e = *x;
    if e[3] < 0.0 {
        for i in 3..7 {
            e[i] = -e[i];
        }
    }
    e[3] -= 1.0;
    e
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Converged,
    MaxIterations,
    /// Solver failure; the plan is the shifted previous one (or a hover rollout).
    Fallback,
}

#[derive(Clone, Debug)]
pub struct PlannedTrajectory {
    pub states: Vec<State>,
    pub inputs: Vec<ControlInput>,
    pub objective: f64,
    pub status: PlanStatus,
    pub iterations: usize,
    pub solve_time: f64,
    /// Final QP working set, reused to warm-start the next plan.
    pub(crate) active: Vec<i8>,
}

/// First input of `plan`, clamped to `[0, u_max]`.
pub fn apply_first(plan: &PlannedTrajectory, u_max: f64) -> ControlInput {
    let u0 = plan.inputs.first().expect("plan has at least one input");
    ControlInput(u0.as_slice().iter().map(|u| u.clamp(0.0, u_max)).collect())
}

/// One RK4 step of the affine model as a function of `[x, u]`.
struct Step<'a> {
    vartheta: &'a [f64],
    gravity: [f64; 3],
    dt: f64,
    m: usize,
}

impl Step<'_> {
    fn apply<S: Scalar>(&self, x: &[S; STATE_DIM], u: &[S]) -> [S; STATE_DIM] {
        let th: Vec<S> = self.vartheta.iter().map(|&v| S::from_f64(v)).collect();
        crate::dynamics::rk4_kernel(x, self.dt, |s| affine_rate(s, u, &th, &self.gravity))
    }

    fn next(&self, x: &StateVector, u: &[f64]) -> StateVector {
        let xa: [f64; STATE_DIM] = (*x).into();
        StateVector::from(self.apply(&xa, u))
    }
}

impl VectorFunction for Step<'_> {
    fn input_dim(&self) -> usize {
        STATE_DIM + self.m
    }
    fn output_dim(&self) -> usize {
        STATE_DIM
    }
    fn eval<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        let x: [S; STATE_DIM] = std::array::from_fn(|i| z[i]);
        self.apply(&x, &z[STATE_DIM..]).to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct Planner {
    pub cfg: NmpcConfig,
    pub model: ModelSpec,
}

struct Iterate {
    xs: Vec<StateVector>,
    us: Vec<DVector<f64>>,
    active: Vec<i8>,
}

impl Planner {
    pub fn new(model: ModelSpec, cfg: NmpcConfig) -> Result<Self, NmpcError> {
        cfg.validate()?;
        Ok(Self { cfg, model })
    }

    /// Plans from `x0` with the model at `estimate`, warm-started from the
    /// previous plan shifted by one step when given.
    pub fn plan(
        &self,
        x0: &State,
        estimate: &ParameterEstimate,
        warm: Option<&PlannedTrajectory>,
    ) -> Result<PlannedTrajectory, NmpcError> {
        let start = Instant::now();
        let m = self.model.rotors();
        if estimate.rotors() != m {
            return Err(DynamicsError::DimensionMismatch { expected: m, got: estimate.rotors() }.into());
        }
        let vt = estimate.relaxed()?.to_vec();
        let u_ref = estimate.hover_thrust(&self.model.gravity);
        let step = Step { vartheta: &vt, gravity: self.model.gravity, dt: self.cfg.dt, m };

        let mut x0v = x0.to_vector();
        let q0 = Quaternion::new(x0v[3], x0v[4], x0v[5], x0v[6]).aligned_with(Quaternion::identity());
        x0v.fixed_rows_mut::<4>(3).copy_from(&q0.to_vector());

        let n = self.cfg.horizon;
        let u_hover = DVector::from_element(m, u_ref.clamp(0.0, self.model.u_max));
        let mut it = match warm.filter(|w| w.inputs.len() == n && w.states.len() == n + 1) {
            Some(w) => self.shifted(w, &x0v),
            None => Iterate {
                xs: self.rollout(&step, &x0v, &vec![u_hover.clone(); n]),
                us: vec![u_hover.clone(); n],
                active: Vec::new(),
            },
        };

        let mut status = PlanStatus::MaxIterations;
        let mut iterations = 0;
        let mut nu = 1.0;
        let mut failed = false;
        for _ in 0..self.cfg.max_iter {
            iterations += 1;
            match self.sqp_step(&step, &mut it, u_ref, &mut nu) {
                Some(du) if du <= self.cfg.tol * self.model.u_max => {
                    status = PlanStatus::Converged;
                    break;
                }
                Some(_) => {}
                None => {
                    failed = true;
                    break;
                }
            }
        }

        let plan = if failed {
            let us = match warm {
                Some(w) if w.inputs.len() == n => self.shifted(w, &x0v).us,
                _ => vec![u_hover; n],
            };
            self.finish(&step, &x0v, us, u_ref, PlanStatus::Fallback, iterations, Vec::new())
        } else {
            self.finish(&step, &x0v, it.us, u_ref, status, iterations, it.active)
        };
        Ok(PlannedTrajectory { solve_time: start.elapsed().as_secs_f64(), ..plan })
    }

    fn shifted(&self, w: &PlannedTrajectory, x0: &StateVector) -> Iterate {
        let n = self.cfg.horizon;
        let mut us: Vec<DVector<f64>> = (0..n)
            .map(|k| DVector::from_column_slice(w.inputs[(k + 1).min(n - 1)].as_slice()))
            .collect();
        for u in &mut us {
            u.apply(|v| *v = v.clamp(0.0, self.model.u_max));
        }
        let mut xs: Vec<StateVector> = (0..=n).map(|k| w.states[(k + 1).min(n)].to_vector()).collect();
        xs[0] = *x0;
        for x in xs.iter_mut().skip(1) {
            let q = Quaternion::new(x[3], x[4], x[5], x[6]);
            if q.dot(Quaternion::new(x0[3], x0[4], x0[5], x0[6])) < 0.0 {
                for i in 3..7 {
                    x[i] = -x[i];
                }
            }
        }
        let m = self.model.rotors();
        let active = if w.active.len() == n * m {
            let mut a = w.active[m..].to_vec();
            a.extend_from_slice(&w.active[(n - 1) * m..]);
            a
        } else {
            Vec::new()
        };
        Iterate { xs, us, active }
    }

    fn rollout(&self, step: &Step, x0: &StateVector, us: &[DVector<f64>]) -> Vec<StateVector> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(*x0);
        for u in us {
            let next = step.next(xs.last().unwrap(), u.as_slice());
            xs.push(next);
        }
        xs
    }

    fn finish(
        &self,
        step: &Step,
        x0: &StateVector,
        us: Vec<DVector<f64>>,
        u_ref: f64,
        status: PlanStatus,
        iterations: usize,
        active: Vec<i8>,
    ) -> PlannedTrajectory {
        let us: Vec<DVector<f64>> = us.into_iter().map(|u| u.map(|v| v.clamp(0.0, self.model.u_max))).collect();
        let xs = self.rollout(step, x0, &us);
        let objective = self.objective(&xs, &us, u_ref);
        PlannedTrajectory {
            states: xs.iter().map(|x| State::from_array(&(*x).into())).collect(),
            inputs: us.iter().map(|u| ControlInput(u.as_slice().to_vec())).collect(),
            objective,
            status,
            iterations,
            solve_time: 0.0,
            active,
        }
    }

    fn weight(&self, k: usize) -> f64 {
        if k == self.cfg.horizon {
            self.cfg.terminal_factor
        } else {
            1.0
        }
    }

    /// Gradient of the weighted state cost at stage `k`.
    fn state_grad(&self, x: &StateVector, k: usize) -> StateVector {
        let e = state_error(x);
        let flip = if x[3] < 0.0 { -1.0 } else { 1.0 };
        let w = 2.0 * self.weight(k);
        StateVector::from_fn(|i, _| {
            let s = if (3..7).contains(&i) { flip } else { 1.0 };
            w * self.cfg.q_diag[i] * e[i] * s
        })
    }

    fn objective(&self, xs: &[StateVector], us: &[DVector<f64>], u_ref: f64) -> f64 {
        let mut j = 0.0;
        for (k, x) in xs.iter().enumerate() {
            let e = state_error(x);
            j += self.weight(k) * (0..STATE_DIM).map(|i| self.cfg.q_diag[i] * e[i] * e[i]).sum::<f64>();
        }
        for u in us {
            j += self.cfg.r_weight * u.iter().map(|v| (v - u_ref) * (v - u_ref)).sum::<f64>();
        }
        j
    }

    fn defects(&self, step: &Step, it: &Iterate) -> Vec<StateVector> {
        (0..self.cfg.horizon).map(|k| step.next(&it.xs[k], it.us[k].as_slice()) - it.xs[k + 1]).collect()
    }

    fn merit(&self, step: &Step, it: &Iterate, u_ref: f64, nu: f64) -> f64 {
        let viol: f64 = self.defects(step, it).iter().map(|d| d.lp_norm(1)).sum();
        self.objective(&it.xs, &it.us, u_ref) + nu * viol
    }

    /// One condensed Gauss-Newton SQP iteration. Returns the max-norm input
    /// increment, or `None` if the QP or line search failed.
    fn sqp_step(&self, step: &Step, it: &mut Iterate, u_ref: f64, nu: &mut f64) -> Option<f64> {
        let n = self.cfg.horizon;
        let m = step.m;
        let nv = n * m;

        let mut a_mats: Vec<Mat13> = Vec::with_capacity(n);
        let mut b_mats: Vec<InputMat> = Vec::with_capacity(n);
        let mut defects: Vec<StateVector> = Vec::with_capacity(n);
        let mut z = vec![0.0; STATE_DIM + m];
        for k in 0..n {
            z[..STATE_DIM].copy_from_slice(it.xs[k].as_slice());
            z[STATE_DIM..].copy_from_slice(it.us[k].as_slice());
            let jac = jacobian(step, &z, DerivativeMode::ForwardAd).ok()?;
            a_mats.push(jac.fixed_view::<STATE_DIM, STATE_DIM>(0, 0).into_owned());
            b_mats.push(jac.generic_view((0, STATE_DIM), (Const::<STATE_DIM>, Dyn(m))).into_owned());
            defects.push(step.next(&it.xs[k], it.us[k].as_slice()) - it.xs[k + 1]);
        }
        let wdiag: Vec<StateVector> =
            (0..=n).map(|k| StateVector::from_fn(|i, _| 2.0 * self.weight(k) * self.cfg.q_diag[i])).collect();

        // Δx_{k+1} = A_k Δx_k + B_k Δu_k + d_k from Δx_0 = 0; c_k is the Δu = 0 part.
        let mut c = vec![StateVector::zeros(); n + 1];
        for k in 0..n {
            c[k + 1] = a_mats[k] * c[k] + defects[k];
        }

        // Gradient by the adjoint λ_k = ∇ℓ_k + A_kᵀ λ_{k+1}, g_j = B_jᵀ λ_{j+1}.
        let mut h = DMatrix::zeros(nv, nv);
        let mut g = DVector::zeros(nv);
        let mut lam = StateVector::zeros();
        for k in (1..=n).rev() {
            lam = self.state_grad(&(it.xs[k] + c[k]), k) + if k < n { a_mats[k].transpose() * lam } else { lam };
            g.rows_mut((k - 1) * m, m).gemv_tr(1.0, &b_mats[k - 1], &lam, 0.0);
        }

        // Column block j of the Hessian: sensitivities S_k = ∂Δx_k/∂Δu_j
        // forward, then V_k = W_k S_k + A_kᵀ V_{k+1} backward, H_ij = B_iᵀ V_{i+1}.
        let mut sens: Vec<InputMat> = vec![InputMat::zeros(m); n + 1];
        for j in 0..n {
            sens[j + 1].copy_from(&b_mats[j]);
            for k in j + 1..n {
                sens[k + 1] = a_mats[k] * &sens[k];
            }
            let mut v = InputMat::zeros(m);
            for k in (j + 1..=n).rev() {
                let mut wk = sens[k].clone();
                for (r, mut row) in wk.row_iter_mut().enumerate() {
                    row *= wdiag[k][r];
                }
                v = if k < n { wk + a_mats[k].transpose() * &v } else { wk };
                let i = k - 1;
                let blk = b_mats[i].transpose() * &v;
                h.view_mut((i * m, j * m), (m, m)).copy_from(&blk);
                if i != j {
                    h.view_mut((j * m, i * m), (m, m)).copy_from(&blk.transpose());
                }
            }
        }
        let mut lb = DVector::zeros(nv);
        let mut ub = DVector::zeros(nv);
        for k in 0..n {
            for i in 0..m {
                let r = k * m + i;
                h[(r, r)] += 2.0 * self.cfg.r_weight;
                g[r] += 2.0 * self.cfg.r_weight * (it.us[k][i] - u_ref);
                lb[r] = -it.us[k][i];
                ub[r] = self.model.u_max - it.us[k][i];
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        let sol = solve_box(&h, &g, &lb, &ub, self.cfg.qp_tol, self.cfg.qp_max_iter, &mut it.active);
        if !sol.is_solved() {
            return None;
        }
        let du = sol.x;

        let mut dx = vec![StateVector::zeros(); n + 1];
        for k in 0..n {
            dx[k + 1] = a_mats[k] * dx[k] + &b_mats[k] * du.rows(k * m, m) + defects[k];
        }

        // Adjoint of the linearized dynamics bounds the multipliers of the defects.
        let mut lam = self.state_grad(&(it.xs[n] + dx[n]), n);
        let mut lam_max = lam.amax();
        for k in (1..n).rev() {
            lam = self.state_grad(&(it.xs[k] + dx[k]), k) + a_mats[k].transpose() * lam;
            lam_max = lam_max.max(lam.amax());
        }
        if 1.1 * lam_max > *nu {
            *nu = 1.1 * lam_max + 1e-8;
        }

        let viol: f64 = defects.iter().map(|d| d.lp_norm(1)).sum();
        let m0 = self.objective(&it.xs, &it.us, u_ref) + *nu * viol;
        let mut slope = -*nu * viol;
        for k in 1..=n {
            slope += self.state_grad(&it.xs[k], k).dot(&dx[k]);
        }
        for k in 0..n {
            for i in 0..m {
                slope += 2.0 * self.cfg.r_weight * (it.us[k][i] - u_ref) * du[k * m + i];
            }
        }

        let mut alpha = 1.0;
        for _ in 0..30 {
            let trial = Iterate {
                active: it.active.clone(),
                xs: it.xs.iter().zip(dx.iter()).map(|(x, d)| x + d * alpha).collect(),
                us: (0..n)
                    .map(|k| {
                        (&it.us[k] + du.rows(k * m, m) * alpha).map(|v| v.clamp(0.0, self.model.u_max))
                    })
                    .collect(),
            };
            let m1 = self.merit(step, &trial, u_ref, *nu);
            let target = if slope < 0.0 { m0 + 1e-4 * alpha * slope } else { m0 };
            if m1.is_finite() && m1 <= target {
                *it = trial;
                return Some(du.amax() * alpha);
            }
            alpha *= 0.5;
        }
        // No decrease along the step: the iterate is already stationary to
        // within round-off when the step or its predicted decrease is negligible.
        if du.amax() <= (self.cfg.tol * self.model.u_max).max(1e-12) || -slope <= 1e-12 * m0.abs().max(1e-12) {
            return Some(0.0);
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rk4_step;

    fn hover_plan(model: &ModelSpec) -> PlannedTrajectory {
        let planner = Planner::new(model.clone(), NmpcConfig::default()).unwrap();
        planner.plan(&State::hover(), &ParameterEstimate::Nominal(model.params.clone()), None).unwrap()
    }

    #[test]
    fn hover_reference_is_a_fixed_point() {
        for model in [ModelSpec::crazyflie(), ModelSpec::fusion1()] {
            let plan = hover_plan(&model);
            assert!(plan.objective <= 1e-6, "{}", plan.objective);
            let uh = model.hover_thrust();
            for u in apply_first(&plan, model.u_max).as_slice() {
                assert!((u - uh).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn plans_are_consistent_and_bounded() {
        let model = ModelSpec::crazyflie();
        let planner = Planner::new(model.clone(), NmpcConfig::default()).unwrap();
        let mut x = State::hover();
        x.p.x = 1.0;
        x.v.y = -0.5;
        let est = ParameterEstimate::Nominal(model.params.clone());
        let plan = planner.plan(&x, &est, None).unwrap();
        assert_eq!(plan.states.len(), 26);
        assert_eq!(plan.states[0], x);
        for k in 0..25 {
            let next = rk4_step(&plan.states[k], &plan.inputs[k], &model.params, 0.02).unwrap();
            let d = (next.to_vector() - plan.states[k + 1].to_vector()).amax();
            assert!(d <= 1e-6, "defect {d} at {k}");
            assert!(plan.inputs[k].as_slice().iter().all(|&u| (0.0..=model.u_max).contains(&u)));
        }
        assert!(plan.states[25].p.norm() < 1.0, "{:?} {} {} {:?}", plan.status, plan.iterations, plan.objective, plan.states[25].p);
    }

    #[test]
    fn apply_first_clamps() {
        let mut plan = hover_plan(&ModelSpec::crazyflie());
        let u_max = ModelSpec::crazyflie().u_max;
        plan.inputs[0].0[2] = u_max + 1e-9;
        plan.inputs[0].0[1] = -1e-9;
        let u = apply_first(&plan, u_max);
        assert_eq!(u.0[2], u_max);
        assert_eq!(u.0[1], 0.0);
        assert_eq!(u.0[0], plan.inputs[0].0[0]);
    }

    #[test]
    fn invalid_config() {
        let cfg = NmpcConfig { horizon: 0, ..Default::default() };
        assert!(Planner::new(ModelSpec::crazyflie(), cfg).is_err());
        let cfg = NmpcConfig { q_diag: vec![1.0; 12], ..Default::default() };
        assert!(Planner::new(ModelSpec::crazyflie(), cfg).is_err());
    }
}
