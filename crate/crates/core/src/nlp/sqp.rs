//! Line-search SQP with an ℓ1 merit function.
//!
//! Each iteration linearizes the constraints, solves a convex QP for the step
//! (Gauss-Newton Hessian for least-squares objectives, damped BFGS otherwise)
//! and backtracks on `f + ν‖viol‖₁`. If the linearized constraints are
//! inconsistent the step comes from an elastic QP with penalized slacks.
//! Objective and constraint rows are scaled so their gradients at the start
//! point are at most [`SqpSettings::max_gradient`] in magnitude.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::derivatives::{jacobian, DerivativeError, DerivativeMode, VectorFunction};
use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus};
use crate::scalar::Scalar;

/// `min f(x)  s.t.  c_eq(x) = 0,  c_in(x) ≤ 0,  lb ≤ x ≤ ub`.
///
/// Least-squares problems set [`NlpProblem::is_least_squares`] and provide
/// `residuals`; the objective then defaults to `Σ rᵢ²`.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;

    fn num_eq(&self) -> usize {
        0
    }

    fn num_ineq(&self) -> usize {
        0
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_vars();
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    fn is_least_squares(&self) -> bool {
        false
    }

    fn num_residuals(&self) -> usize {
        0
    }

    fn residuals<S: Scalar>(&self, _x: &[S]) -> Vec<S> {
        Vec::new()
    }

    fn objective<S: Scalar>(&self, x: &[S]) -> S {
        self.residuals(x).into_iter().fold(S::zero(), |acc, r| acc + r * r)
    }

    fn eq_constraints<S: Scalar>(&self, _x: &[S]) -> Vec<S> {
        Vec::new()
    }

    fn ineq_constraints<S: Scalar>(&self, _x: &[S]) -> Vec<S> {
        Vec::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Gauss-Newton for least-squares problems, BFGS otherwise.
    Auto,
    GaussNewton,
    Bfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SqpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub hessian: HessianMode,
    pub derivatives: DerivativeMode,
    pub qp: QpSettings,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Gradient magnitude above which objective and constraints are scaled down.
    pub max_gradient: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            hessian: HessianMode::Auto,
            derivatives: DerivativeMode::ForwardAd,
            qp: QpSettings::with_tolerance(1e-10),
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            max_gradient: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    QpFailed,
}

/// Merit values before and after an accepted step, with the same penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeritStep {
    pub before: f64,
    pub after: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug)]
pub struct NlpSolution {
    pub x: Vec<f64>,
    pub status: NlpStatus,
    pub iterations: usize,
    pub objective: f64,
    /// Max-norm violation of the unscaled constraints.
    pub feasibility: f64,
    /// Max-norm Lagrangian gradient of the scaled problem.
    pub stationarity: f64,
    pub lambda_eq: Vec<f64>,
    pub lambda_ineq: Vec<f64>,
    pub merit: Vec<MeritStep>,
}

impl NlpSolution {
    pub fn converged(&self) -> bool {
        self.status == NlpStatus::Converged
    }
}

#[derive(Debug, Error)]
pub enum NlpError {
    #[error("initial guess has {got} entries, problem has {expected} variables")]
    Dimension { expected: usize, got: usize },
    #[error("bounds are inconsistent at variable {0}")]
    Bounds(usize),
    #[error("problem functions are not finite at the initial guess")]
    NonFinite,
    #[error(transparent)]
    Derivative(#[from] DerivativeError),
}

/// All problem functions stacked: `[f or r, c_eq, c_in]`.
struct Stacked<'a, P> {
    prob: &'a P,
    head: usize,
}

impl<P: NlpProblem> VectorFunction for Stacked<'_, P> {
    fn input_dim(&self) -> usize {
        self.prob.num_vars()
    }

    fn output_dim(&self) -> usize {
        self.head + self.prob.num_eq() + self.prob.num_ineq()
    }

    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut out = if self.prob.is_least_squares() {
            self.prob.residuals(x)
        } else {
            vec![self.prob.objective(x)]
        };
        out.extend(self.prob.eq_constraints(x));
        out.extend(self.prob.ineq_constraints(x));
        out
    }
}

struct Point {
    f: f64,
    grad: DVector<f64>,
    /// Residual Jacobian, least-squares problems only.
    jr: Option<DMatrix<f64>>,
    c_eq: DVector<f64>,
    j_eq: DMatrix<f64>,
    c_in: DVector<f64>,
    j_in: DMatrix<f64>,
}

struct Scales {
    f: f64,
    eq: DVector<f64>,
    ineq: DVector<f64>,
}

struct Evaluator<'a, P> {
    fun: Stacked<'a, P>,
    m_eq: usize,
    m_in: usize,
    mode: DerivativeMode,
}

impl<'a, P: NlpProblem> Evaluator<'a, P> {
    fn new(prob: &'a P, mode: DerivativeMode) -> Self {
        let head = if prob.is_least_squares() { prob.num_residuals() } else { 1 };
        Self { fun: Stacked { prob, head }, m_eq: prob.num_eq(), m_in: prob.num_ineq(), mode }
    }

    fn split(&self, v: &[f64]) -> (f64, DVector<f64>, DVector<f64>) {
        let h = self.fun.head;
        let f = if self.fun.prob.is_least_squares() { v[..h].iter().map(|r| r * r).sum() } else { v[0] };
        let c_eq = DVector::from_column_slice(&v[h..h + self.m_eq]);
        let c_in = DVector::from_column_slice(&v[h + self.m_eq..]);
        (f, c_eq, c_in)
    }

    fn values(&self, x: &[f64]) -> (f64, DVector<f64>, DVector<f64>) {
        self.split(&self.fun.eval(x))
    }

    fn point(&self, x: &[f64]) -> Result<Point, DerivativeError> {
        let v = self.fun.eval(x);
        let jac = jacobian(&self.fun, x, self.mode)?;
        let h = self.fun.head;
        let (f, c_eq, c_in) = self.split(&v);
        let (grad, jr) = if self.fun.prob.is_least_squares() {
            let jr = jac.rows(0, h).into_owned();
            let r = DVector::from_column_slice(&v[..h]);
            (2.0 * jr.transpose() * r, Some(jr))
        } else {
            (jac.row(0).transpose(), None)
        };
        Ok(Point {
            f,
            grad,
            jr,
            c_eq,
            j_eq: jac.rows(h, self.m_eq).into_owned(),
            c_in,
            j_in: jac.rows(h + self.m_eq, self.m_in).into_owned(),
        })
    }
}

fn row_scales(j: &DMatrix<f64>, cap: f64) -> DVector<f64> {
    DVector::from_fn(j.nrows(), |i, _| {
        let g = j.row(i).amax();
        if g > cap {
            cap / g
        } else {
            1.0
        }
    })
}

fn violation_l1(c_eq: &DVector<f64>, c_in: &DVector<f64>) -> f64 {
    c_eq.iter().map(|c| c.abs()).sum::<f64>() + c_in.iter().map(|c| c.max(0.0)).sum::<f64>()
}

fn violation_max(c_eq: &DVector<f64>, c_in: &DVector<f64>) -> f64 {
    c_eq.iter().map(|c| c.abs()).chain(c_in.iter().map(|c| c.max(0.0))).fold(0.0, f64::max)
}

/// Solves `prob` from `x0` by SQP.
pub fn solve_nlp<P: NlpProblem>(prob: &P, x0: &[f64], settings: &SqpSettings) -> Result<NlpSolution, NlpError> {
    let n = prob.num_vars();
    if x0.len() != n {
        return Err(NlpError::Dimension { expected: n, got: x0.len() });
    }
    let (lb, ub) = prob.bounds();
    if lb.len() != n || ub.len() != n {
        return Err(NlpError::Dimension { expected: n, got: lb.len().min(ub.len()) });
    }
    if let Some(i) = (0..n).find(|&i| !(lb[i] <= ub[i])) {
        return Err(NlpError::Bounds(i));
    }
    let bounded: Vec<usize> = (0..n).filter(|&i| lb[i].is_finite() || ub[i].is_finite()).collect();
    let clamp = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lb[i], ub[i]);
        }
    };

    let ev = Evaluator::new(prob, settings.derivatives);
    let gauss_newton = match settings.hessian {
        HessianMode::Auto => prob.is_least_squares(),
        HessianMode::GaussNewton => {
            assert!(prob.is_least_squares(), "Gauss-Newton needs a least-squares problem");
            true
        }
        HessianMode::Bfgs => false,
    };

    let mut x = x0.to_vec();
    clamp(&mut x);
    let mut pt = ev.point(&x)?;
    let finite = pt.f.is_finite()
        && pt.grad.iter().chain(pt.c_eq.iter()).chain(pt.c_in.iter()).all(|v| v.is_finite());
    if !finite {
        return Err(NlpError::NonFinite);
    }

    let cap = settings.max_gradient;
    let gmax = pt.grad.amax();
    let sc = Scales {
        f: if gmax > cap { cap / gmax } else { 1.0 },
        eq: row_scales(&pt.j_eq, cap),
        ineq: row_scales(&pt.j_in, cap),
    };
    let m_eq = ev.m_eq;
    let m_in = ev.m_in;
    let scaled_merit = |f: f64, c_eq: &DVector<f64>, c_in: &DVector<f64>, nu: f64| {
        sc.f * f + nu * violation_l1(&c_eq.component_mul(&sc.eq), &c_in.component_mul(&sc.ineq))
    };

    let mut bfgs = DMatrix::<f64>::identity(n, n);
    let mut nu = 1.0;
    let mut qp = QpSolver::new(settings.qp.clone());
    let mut lam_eq = DVector::zeros(m_eq);
    let mut lam_in = DVector::zeros(m_in);
    let mut merit = Vec::new();
    let mut status = NlpStatus::MaxIterations;
    let mut stationarity = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..settings.max_iter {
        let g = &pt.grad * sc.f;
        let j_eq = DMatrix::from_diagonal(&sc.eq) * &pt.j_eq;
        let j_in = DMatrix::from_diagonal(&sc.ineq) * &pt.j_in;
        let c_eq = pt.c_eq.component_mul(&sc.eq);
        let c_in = pt.c_in.component_mul(&sc.ineq);
        let mut h = if gauss_newton {
            let jr = pt.jr.as_ref().expect("least-squares point");
            jr.tr_mul(jr) * (2.0 * sc.f)
        } else {
            bfgs.clone()
        };
        h = (&h + h.transpose()) * 0.5;

        let step = qp_step(&mut qp, &h, &g, &j_eq, &c_eq, &j_in, &c_in, &x, &lb, &ub, &bounded, nu);
        let Some((d, y_eq, y_in, y_bnd)) = step else {
            status = NlpStatus::QpFailed;
            break;
        };

        let mut lag = &g + j_eq.tr_mul(&y_eq) + j_in.tr_mul(&y_in);
        for (k, &i) in bounded.iter().enumerate() {
            lag[i] += y_bnd[k];
        }
        stationarity = lag.amax();
        let feas = violation_max(&c_eq, &c_in);
        let xnorm = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tiny_step = d.amax() <= 1e-14 * (1.0 + xnorm);
        // Gauss-Newton predicted decrease at round-off relative to the objective
        let flat = gauss_newton && -g.dot(&d) <= settings.tol * (1e-6 + sc.f * pt.f.abs());
        if feas <= settings.tol && (stationarity <= settings.tol || tiny_step || flat) {
            lam_eq = y_eq;
            lam_in = y_in;
            status = NlpStatus::Converged;
            break;
        }
        iterations += 1;

        let ymax = y_eq.amax().max(y_in.amax());
        if 1.1 * ymax > nu {
            nu = 1.1 * ymax + 1e-8;
        }
        let m0 = scaled_merit(pt.f, &pt.c_eq, &pt.c_in, nu);
        let slope = g.dot(&d) - nu * violation_l1(&c_eq, &c_in);

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..settings.max_backtracks {
            let mut xt: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
            clamp(&mut xt);
            let (f, ce, ci) = ev.values(&xt);
            let m1 = scaled_merit(f, &ce, &ci, nu);
            let target = if slope < 0.0 { m0 + settings.armijo * alpha * slope } else { m0 };
            if m1.is_finite() && m1 <= target {
                accepted = Some((xt, m1));
                break;
            }
            alpha *= settings.backtrack;
        }
        let Some((xt, m1)) = accepted else {
            lam_eq = y_eq;
            lam_in = y_in;
            status = NlpStatus::LineSearchFailed;
            break;
        };
        merit.push(MeritStep { before: m0, after: m1, penalty: nu });

        let new_pt = ev.point(&xt)?;
        if !gauss_newton {
            let s = DVector::from_iterator(n, xt.iter().zip(x.iter()).map(|(a, b)| a - b));
            let lag_grad = |p: &Point| {
                &p.grad * sc.f
                    + (DMatrix::from_diagonal(&sc.eq) * &p.j_eq).tr_mul(&y_eq)
                    + (DMatrix::from_diagonal(&sc.ineq) * &p.j_in).tr_mul(&y_in)
            };
            let yv = lag_grad(&new_pt) - lag_grad(&pt);
            damped_bfgs(&mut bfgs, &s, &yv);
        }
        lam_eq = y_eq;
        lam_in = y_in;
        x = xt;
        pt = new_pt;
    }

    Ok(NlpSolution {
        objective: pt.f,
        feasibility: violation_max(&pt.c_eq, &pt.c_in),
        stationarity,
        lambda_eq: lam_eq.component_mul(&sc.eq).iter().map(|v| v / sc.f).collect(),
        lambda_ineq: lam_in.component_mul(&sc.ineq).iter().map(|v| v / sc.f).collect(),
        x,
        status,
        iterations,
        merit,
    })
}

type Step = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

#[allow(clippy::too_many_arguments)]
fn qp_step(
    qp: &mut QpSolver,
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    j_eq: &DMatrix<f64>,
    c_eq: &DVector<f64>,
    j_in: &DMatrix<f64>,
    c_in: &DVector<f64>,
    x: &[f64],
    lb: &[f64],
    ub: &[f64],
    bounded: &[usize],
    nu: f64,
) -> Option<Step> {
    let n = g.len();
    let (m_eq, m_in, m_b) = (c_eq.len(), c_in.len(), bounded.len());
    let rows = m_eq + m_in + m_b;
    let mut a = DMatrix::zeros(rows, n);
    let mut l = DVector::zeros(rows);
    let mut u = DVector::zeros(rows);
    a.rows_mut(0, m_eq).copy_from(j_eq);
    a.rows_mut(m_eq, m_in).copy_from(j_in);
    for i in 0..m_eq {
        l[i] = -c_eq[i];
        u[i] = -c_eq[i];
    }
    for i in 0..m_in {
        l[m_eq + i] = f64::NEG_INFINITY;
        u[m_eq + i] = -c_in[i];
    }
    for (k, &i) in bounded.iter().enumerate() {
        a[(m_eq + m_in + k, i)] = 1.0;
        l[m_eq + m_in + k] = lb[i] - x[i];
        u[m_eq + m_in + k] = ub[i] - x[i];
    }
    let prob = QpProblem::new(h.clone(), g.clone(), a.clone(), l.clone(), u.clone()).ok()?;
    let sol = qp.solve(&prob);
    let split = |y: &DVector<f64>| {
        (
            y.rows(0, m_eq).into_owned(),
            y.rows(m_eq, m_in).into_owned(),
            y.rows(m_eq + m_in, m_b).into_owned(),
        )
    };
    match sol.status {
        QpStatus::Solved => {
            let (ye, yi, yb) = split(&sol.y);
            return Some((sol.x, ye, yi, yb));
        }
        QpStatus::DualInfeasible => return None,
        QpStatus::PrimalInfeasible | QpStatus::MaxIterations => {}
    }
    if m_eq + m_in == 0 {
        return None;
    }

    // Elastic mode: [d, p, q, t] with c_eq + J d = p - q, c_in + J d ≤ t.
    let ne = n + 2 * m_eq + m_in;
    let mut pe = DMatrix::zeros(ne, ne);
    pe.view_mut((0, 0), (n, n)).copy_from(h);
    let mut qe = DVector::from_element(ne, nu.max(1.0));
    qe.rows_mut(0, n).copy_from(g);
    let slacks = 2 * m_eq + m_in;
    let mut ae = DMatrix::zeros(rows + slacks, ne);
    ae.view_mut((0, 0), (rows, n)).copy_from(&a);
    for i in 0..m_eq {
        ae[(i, n + i)] = -1.0;
        ae[(i, n + m_eq + i)] = 1.0;
    }
    for i in 0..m_in {
        ae[(m_eq + i, n + 2 * m_eq + i)] = -1.0;
    }
    let mut le = l.clone().resize_vertically(rows + slacks, 0.0);
    let mut ue = u.clone().resize_vertically(rows + slacks, f64::INFINITY);
    for k in 0..slacks {
        ae[(rows + k, n + k)] = 1.0;
        le[rows + k] = 0.0;
        ue[rows + k] = f64::INFINITY;
    }
    let prob = QpProblem::new(pe, qe, ae, le, ue).ok()?;
    let mut elastic = QpSolver::new(qp.settings.clone());
    let sol = elastic.solve(&prob);
    if !sol.is_solved() {
        return None;
    }
    let d = sol.x.rows(0, n).into_owned();
    let (ye, yi, yb) = split(&sol.y.rows(0, rows).into_owned());
    Some((d, ye, yi, yb))
}

/// Powell-damped BFGS update keeping `b` positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if !(sbs > 1e-16) {
        return;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if !(sr > 1e-16) {
        return;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Shifted;

    impl NlpProblem for Shifted {
        fn num_vars(&self) -> usize {
            1
        }
        fn objective<S: Scalar>(&self, x: &[S]) -> S {
            (x[0] - 3.0) * (x[0] - 3.0)
        }
    }

    struct ShiftedLs {
        lower: f64,
    }

    impl NlpProblem for ShiftedLs {
        fn num_vars(&self) -> usize {
            1
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![self.lower], vec![f64::INFINITY])
        }
        fn is_least_squares(&self) -> bool {
            true
        }
        fn num_residuals(&self) -> usize {
            1
        }
        fn residuals<S: Scalar>(&self, x: &[S]) -> Vec<S> {
            vec![x[0] - 3.0]
        }
    }

    #[test]
    fn unconstrained_quadratic() {
        let sol = solve_nlp(&Shifted, &[-4.0], &SqpSettings::default()).unwrap();
        assert!(sol.converged());
        assert!((sol.x[0] - 3.0).abs() < 1e-8);
        let ls = solve_nlp(&ShiftedLs { lower: f64::NEG_INFINITY }, &[10.0], &SqpSettings::default()).unwrap();
        assert!(ls.converged());
        assert!((ls.x[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn active_bound() {
        let sol = solve_nlp(&ShiftedLs { lower: 5.0 }, &[7.0], &SqpSettings::default()).unwrap();
        assert!(sol.converged(), "{:?}", sol.status);
        assert!((sol.x[0] - 5.0).abs() < 1e-8);
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(
            solve_nlp(&Shifted, &[1.0, 2.0], &SqpSettings::default()),
            Err(NlpError::Dimension { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn bfgs_update_keeps_definiteness() {
        let mut b = DMatrix::identity(2, 2);
        damped_bfgs(&mut b, &DVector::from_vec(vec![1.0, 0.0]), &DVector::from_vec(vec![-3.0, 1.0]));
        let eig = b.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > 0.0), "{eig}");
    }
}
