//! Convex QP solver based on operator splitting (ADMM).
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀ P x + qᵀ x
//! subject to  l ≤ A x ≤ u
//! ```
//!
//! with Ruiz equilibration, adaptive step-size (`ρ`) updates, infeasibility
//! certificates from successive iterate differences, and a polishing step
//! that solves the equality-constrained KKT system on the detected active
//! set. Polishing is attempted as soon as the active set settles, which is
//! what makes the 1e-8 tolerances practical on badly scaled problems.
//!
//! Dual sign convention: `y ≥ 0` on rows active at the upper bound, `y ≤ 0`
//! at the lower bound, and `P x + q + Aᵀ y = 0` at optimality.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("cost matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("constraint row {row} has lower bound {lower} above upper bound {upper}")]
    InvertedBounds { row: usize, lower: f64, upper: f64 },
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
    #[error("KKT factorization failed")]
    Factorization,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed problem dump: {0}")]
    Parse(String),
}

/// `min ½xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        let k = a.nrows();
        let dim = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(QpError::Dimension { what, expected, got })
            }
        };
        dim("P rows", n, p.nrows())?;
        dim("P cols", n, p.ncols())?;
        dim("A cols", n, a.ncols())?;
        dim("l", k, l.len())?;
        dim("u", k, u.len())?;
        if p.iter().chain(q.iter()).chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("P, q or A"));
        }
        let scale = p.amax().max(1.0);
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(QpError::Asymmetric(asym));
        }
        for i in 0..k {
            if !(l[i] <= u[i]) || l[i] == f64::INFINITY || u[i] == f64::NEG_INFINITY {
                return Err(QpError::InvertedBounds { row: i, lower: l[i], upper: u[i] });
            }
        }
        Ok(Self { p, q, a, l, u })
    }

    /// Box-constrained problem `lb ≤ x ≤ ub`.
    pub fn with_box(
        p: DMatrix<f64>,
        q: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        Self::new(p, q, DMatrix::identity(n, n), lb, ub)
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Writes the problem data as a sequence of matrix-market coordinate blocks.
    pub fn write_matrix_market(&self, path: impl AsRef<Path>) -> Result<(), QpError> {
        let mut s = String::new();
        let mut block = |name: &str, m: &DMatrix<f64>| {
            let nnz = m.iter().filter(|v| **v != 0.0).count();
            let _ = writeln!(s, "%%MatrixMarket matrix coordinate real general");
            let _ = writeln!(s, "% {name}");
            let _ = writeln!(s, "{} {} {}", m.nrows(), m.ncols(), nnz);
            for j in 0..m.ncols() {
                for i in 0..m.nrows() {
                    let v = m[(i, j)];
                    if v != 0.0 {
                        let _ = writeln!(s, "{} {} {:e}", i + 1, j + 1, v);
                    }
                }
            }
        };
        block("P", &self.p);
        block("q", &DMatrix::from_column_slice(self.q.len(), 1, self.q.as_slice()));
        block("A", &self.a);
        block("l", &DMatrix::from_column_slice(self.l.len(), 1, self.l.as_slice()));
        block("u", &DMatrix::from_column_slice(self.u.len(), 1, self.u.as_slice()));
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read_matrix_market(path: impl AsRef<Path>) -> Result<Self, QpError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().peekable();
        let mut blocks: Vec<DMatrix<f64>> = Vec::new();
        let bad = |m: &str| QpError::Parse(m.to_string());
        while let Some(line) = lines.next() {
            if line.starts_with('%') || line.trim().is_empty() {
                continue;
            }
            let dims: Vec<usize> =
                line.split_whitespace().map(|t| t.parse().map_err(|_| bad(line))).collect::<Result<_, _>>()?;
            let [r, c, nnz] = dims[..] else { return Err(bad(line)) };
            let mut m = DMatrix::zeros(r, c);
            for _ in 0..nnz {
                let entry = lines.next().ok_or_else(|| bad("truncated block"))?;
                let t: Vec<&str> = entry.split_whitespace().collect();
                if t.len() != 3 {
                    return Err(bad(entry));
                }
                let i: usize = t[0].parse().map_err(|_| bad(entry))?;
                let j: usize = t[1].parse().map_err(|_| bad(entry))?;
                let v: f64 = t[2].parse().map_err(|_| bad(entry))?;
                m[(i - 1, j - 1)] = v;
            }
            blocks.push(m);
        }
        if blocks.len() != 5 {
            return Err(bad("expected five blocks (P, q, A, l, u)"));
        }
        let col = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        Self::new(blocks[0].clone(), col(&blocks[1]), blocks[2].clone(), col(&blocks[3]), col(&blocks[4]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

impl QpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub scaling_iters: usize,
    pub polish: bool,
    pub polish_delta: f64,
    pub polish_refine_iters: usize,
    pub check_interval: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            eps_infeasible: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            scaling_iters: 10,
            polish: true,
            polish_delta: 1e-7,
            polish_refine_iters: 5,
            check_interval: 5,
        }
    }
}

impl QpSettings {
    pub fn with_tolerance(tol: f64) -> Self {
        Self { eps_abs: tol, eps_rel: tol, ..Self::default() }
    }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_ADAPT_RATIO: f64 = 5.0;
const INF_BOUND: f64 = 1e20;

/// One-shot solve with default settings and the given tolerance.
pub fn solve(prob: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    let settings = QpSettings { max_iter, ..QpSettings::with_tolerance(tol) };
    QpSolver::new(settings).solve(prob)
}

/// Reusable solver holding the previous solution for warm starts.
#[derive(Clone, Debug, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
    warm: Option<(DVector<f64>, DVector<f64>)>,
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    s: Scaling,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings, warm: None }
    }

    pub fn set_warm_start(&mut self, x: DVector<f64>, y: DVector<f64>) {
        self.warm = Some((x, y));
    }

    pub fn clear_warm_start(&mut self) {
        self.warm = None;
    }

    /// Solves `prob`, warm-starting from the last solution when dimensions match.
    pub fn solve(&mut self, prob: &QpProblem) -> QpSolution {
        let warm = self
            .warm
            .take()
            .filter(|(x, y)| x.len() == prob.num_vars() && y.len() == prob.num_constraints());
        let sol = run_admm(prob, &self.settings, warm);
        if sol.x.iter().chain(sol.y.iter()).all(|v| v.is_finite()) {
            self.warm = Some((sol.x.clone(), sol.y.clone()));
        }
        sol
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn clip_scale(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.clamp(1e-4, 1e4)
    }
}

fn equilibrate(prob: &QpProblem, iters: usize) -> Scaled {
    let n = prob.num_vars();
    let k = prob.num_constraints();
    let mut p = prob.p.clone();
    let mut q = prob.q.clone();
    let mut a = prob.a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(k, 1.0);
    for _ in 0..iters {
        let dd = DVector::from_fn(n, |j, _| {
            let cp = p.column(j).amax();
            let ca = if k > 0 { a.column(j).amax() } else { 0.0 };
            1.0 / clip_scale(cp.max(ca)).sqrt()
        });
        let de = DVector::from_fn(k, |i, _| 1.0 / clip_scale(a.row(i).amax()).sqrt());
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..k {
                a[(i, j)] *= de[i] * dd[j];
            }
            q[j] *= dd[j];
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let c = if iters > 0 {
        let mean_col = if n > 0 { (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64 } else { 0.0 };
        1.0 / clip_scale(mean_col.max(q.amax()))
    } else {
        1.0
    };
    p *= c;
    q *= c;
    let l = DVector::from_fn(k, |i, _| scale_bound(prob.l[i], e[i]));
    let u = DVector::from_fn(k, |i, _| scale_bound(prob.u[i], e[i]));
    Scaled { p, q, a, l, u, s: Scaling { d, e, c } }
}

fn scale_bound(b: f64, e: f64) -> f64 {
    if b.abs() >= INF_BOUND {
        b.signum() * f64::INFINITY
    } else {
        b * e
    }
}

fn rho_vector(sc: &Scaled, rho: f64) -> DVector<f64> {
    DVector::from_fn(sc.l.len(), |i, _| {
        let (l, u) = (sc.l[i], sc.u[i]);
        if l == f64::NEG_INFINITY && u == f64::INFINITY {
            RHO_MIN
        } else if (u - l).abs() < 1e-12 * (1.0 + l.abs()) {
            (RHO_EQ_FACTOR * rho).min(RHO_MAX)
        } else {
            rho
        }
    })
}

fn factor_kkt(sc: &Scaled, rho: &DVector<f64>, sigma: f64) -> Option<Cholesky<f64, Dyn>> {
    let n = sc.q.len();
    let mut k = sc.p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    if sc.a.nrows() > 0 {
        let ra = DMatrix::from_fn(sc.a.nrows(), n, |i, j| rho[i] * sc.a[(i, j)]);
        k.gemm_tr(1.0, &sc.a, &ra, 1.0);
    }
    Cholesky::new(k)
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
}

impl Residuals {
    fn converged(&self) -> bool {
        self.prim <= self.eps_prim && self.dual <= self.eps_dual
    }
}

/// Residuals in the original (unscaled) problem.
fn residuals(prob: &QpProblem, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, st: &QpSettings) -> Residuals {
    let ax = &prob.a * x;
    let px = &prob.p * x;
    let aty = prob.a.tr_mul(y);
    let prim = inf_norm(&(&ax - z));
    let dual = inf_norm(&(&px + &prob.q + &aty));
    let eps_prim = st.eps_abs + st.eps_rel * inf_norm(&ax).max(inf_norm(z));
    let eps_dual = st.eps_abs + st.eps_rel * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.q));
    Residuals { prim, dual, eps_prim, eps_dual }
}

fn project(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(l[i], u[i]))
}

fn run_admm(
    prob: &QpProblem,
    st: &QpSettings,
    warm: Option<(DVector<f64>, DVector<f64>)>,
) -> QpSolution {
    let n = prob.num_vars();
    let k = prob.num_constraints();
    let sc = equilibrate(prob, st.scaling_iters);
    let Scaling { d, e, c } = &sc.s;
    let unscale_x = |xs: &DVector<f64>| xs.component_mul(d);
    let unscale_y = |ys: &DVector<f64>| ys.component_mul(e) / *c;
    let unscale_z = |zs: &DVector<f64>| zs.component_div(e);

    let (mut x, mut y) = match &warm {
        Some((x0, y0)) => (x0.component_div(d), y0.component_div(e) * *c),
        None => (DVector::zeros(n), DVector::zeros(k)),
    };
    let mut z = project(&(&sc.a * &x), &sc.l, &sc.u);

    let mut rho = st.rho;
    let mut rho_vec = rho_vector(&sc, rho);
    let Some(mut chol) = factor_kkt(&sc, &rho_vec, st.sigma) else {
        return failed(n, k, QpStatus::MaxIterations);
    };

    let mut last_active: Option<Vec<i8>> = None;
    let mut tried_polish: Option<Vec<i8>> = None;
    let mut best: Option<QpSolution> = None;

    let finish = |x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, status, it, polished| {
        let (xu, yu, zu) = (unscale_x(x), unscale_y(y), unscale_z(z));
        let r = residuals(prob, &xu, &yu, &zu, st);
        QpSolution { x: xu, y: yu, status, iterations: it, primal_residual: r.prim, dual_residual: r.dual, polished }
    };

    for it in 0..=st.max_iter {
        let check = it % st.check_interval.max(1) == 0 || it == st.max_iter;
        if check {
            let (xu, yu, zu) = (unscale_x(&x), unscale_y(&y), unscale_z(&z));
            let res = residuals(prob, &xu, &yu, &zu, st);
            if res.converged() {
                let sol = finish(&x, &y, &z, QpStatus::Solved, it, false);
                if st.polish {
                    if let Some(p) = polish(prob, &sc, &y, &z, st, it) {
                        return p;
                    }
                }
                return sol;
            }
            if st.polish && (it > 0 || warm.is_some()) {
                let active = active_set(&sc, &y, &z);
                let settled = last_active.as_ref() == Some(&active) || (it == 0 && warm.is_some());
                if settled && tried_polish.as_ref() != Some(&active) {
                    if let Some(p) = polish(prob, &sc, &y, &z, st, it) {
                        return p;
                    }
                    tried_polish = Some(active.clone());
                }
                last_active = Some(active);
            }
            if it == st.max_iter {
                best = Some(finish(&x, &y, &z, QpStatus::MaxIterations, it, false));
                break;
            }
            if st.adaptive_rho && it > 0 && it % (5 * st.check_interval.max(1)) == 0 {
                let new_rho = adapted_rho(&sc, &x, &y, &z, rho);
                if new_rho > rho * RHO_ADAPT_RATIO || new_rho < rho / RHO_ADAPT_RATIO {
                    rho = new_rho;
                    rho_vec = rho_vector(&sc, rho);
                    match factor_kkt(&sc, &rho_vec, st.sigma) {
                        Some(f) => chol = f,
                        None => return failed(n, k, QpStatus::MaxIterations),
                    }
                }
            }
        }

        // ADMM step
        let mut rhs = &x * st.sigma - &sc.q;
        if k > 0 {
            let w = rho_vec.component_mul(&z) - &y;
            rhs += sc.a.tr_mul(&w);
        }
        let xt = chol.solve(&rhs);
        let zt = &sc.a * &xt;
        let x_new = &xt * st.alpha + &x * (1.0 - st.alpha);
        let z_relax = &zt * st.alpha + &z * (1.0 - st.alpha);
        let z_new = project(&(&z_relax + y.component_div(&rho_vec)), &sc.l, &sc.u);
        let y_new = &y + rho_vec.component_mul(&(&z_relax - &z_new));

        if check && it > 0 {
            let dy = &y_new - &y;
            if primal_infeasible(&sc, &dy, st.eps_infeasible) {
                let mut sol = finish(&x_new, &y_new, &z_new, QpStatus::PrimalInfeasible, it + 1, false);
                sol.y = unscale_y(&dy);
                return sol;
            }
            let dx = &x_new - &x;
            if dual_infeasible(&sc, &dx, st.eps_infeasible) {
                let mut sol = finish(&x_new, &y_new, &z_new, QpStatus::DualInfeasible, it + 1, false);
                sol.x = unscale_x(&dx);
                return sol;
            }
        }
        x = x_new;
        z = z_new;
        y = y_new;
        if x.iter().any(|v| !v.is_finite()) {
            return failed(n, k, QpStatus::MaxIterations);
        }
    }
    best.unwrap_or_else(|| failed(n, k, QpStatus::MaxIterations))
}

fn failed(n: usize, k: usize, status: QpStatus) -> QpSolution {
    QpSolution {
        x: DVector::zeros(n),
        y: DVector::zeros(k),
        status,
        iterations: 0,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
        polished: false,
    }
}

fn adapted_rho(sc: &Scaled, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, rho: f64) -> f64 {
    let ax = &sc.a * x;
    let px = &sc.p * x;
    let aty = sc.a.tr_mul(y);
    let prim = inf_norm(&(&ax - z)) / inf_norm(&ax).max(inf_norm(z)).max(1e-30);
    let dual = inf_norm(&(&px + &sc.q + &aty))
        / inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&sc.q)).max(1e-30);
    if dual <= 0.0 || prim <= 0.0 {
        return rho;
    }
    (rho * (prim / dual).sqrt()).clamp(RHO_MIN, RHO_MAX)
}

fn primal_infeasible(sc: &Scaled, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(dy);
    if norm < 1e-30 {
        return false;
    }
    if inf_norm(&sc.a.tr_mul(dy)) > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if sc.u[i] == f64::INFINITY {
                return false;
            }
            support += sc.u[i] * dy[i];
        } else if dy[i] < 0.0 {
            if sc.l[i] == f64::NEG_INFINITY {
                return false;
            }
            support += sc.l[i] * dy[i];
        }
    }
    support < -eps * norm
}

fn dual_infeasible(sc: &Scaled, dx: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(dx);
    if norm < 1e-30 {
        return false;
    }
    let tol = eps * norm;
    if inf_norm(&(&sc.p * dx)) > tol || sc.q.dot(dx) > -tol {
        return false;
    }
    let adx = &sc.a * dx;
    (0..adx.len()).all(|i| {
        let lo_ok = sc.l[i] == f64::NEG_INFINITY || adx[i] >= -tol;
        let hi_ok = sc.u[i] == f64::INFINITY || adx[i] <= tol;
        lo_ok && hi_ok
    })
}

/// -1 lower-active, +1 upper-active, 0 inactive (scaled space).
fn active_set(sc: &Scaled, y: &DVector<f64>, z: &DVector<f64>) -> Vec<i8> {
    (0..y.len())
        .map(|i| {
            let (l, u) = (sc.l[i], sc.u[i]);
            if l == u {
                if y[i] >= 0.0 {
                    1
                } else {
                    -1
                }
            } else if z[i] - l < -y[i] {
                -1
            } else if u - z[i] < y[i] {
                1
            } else {
                0
            }
        })
        .collect()
}

/// Solves the KKT system restricted to the active set and accepts the result
/// only if it is primal feasible, dual sign-consistent and within tolerance.
fn polish(
    prob: &QpProblem,
    sc: &Scaled,
    y: &DVector<f64>,
    z: &DVector<f64>,
    st: &QpSettings,
    it: usize,
) -> Option<QpSolution> {
    let n = sc.q.len();
    let active = active_set(sc, y, z);
    let rows: Vec<usize> = (0..active.len()).filter(|&i| active[i] != 0).collect();
    let na = rows.len();
    let dim = n + na;
    let delta = st.polish_delta;

    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&sc.p);
    for (r, &i) in rows.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = sc.a[(i, j)];
            kkt[(j, n + r)] = sc.a[(i, j)];
        }
    }
    let exact = kkt.clone();
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for r in 0..na {
        kkt[(n + r, n + r)] -= delta;
    }
    let mut rhs = DVector::zeros(dim);
    for j in 0..n {
        rhs[j] = -sc.q[j];
    }
    for (r, &i) in rows.iter().enumerate() {
        rhs[n + r] = if active[i] < 0 { sc.l[i] } else { sc.u[i] };
    }
    // The unregularized system is nonsingular whenever the active rows are
    // independent and P is definite on their null space; the regularized one
    // with iterative refinement covers the rest.
    let refine = |lu: &nalgebra::LU<f64, Dyn, Dyn>, mut sol: DVector<f64>| {
        for _ in 0..st.polish_refine_iters {
            let r = &rhs - &exact * &sol;
            sol += lu.solve(&r)?;
        }
        Some(sol)
    };
    let direct = exact.clone().lu();
    let sol = direct
        .solve(&rhs)
        .and_then(|s| refine(&direct, s))
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .or_else(|| {
            let lu = kkt.lu();
            lu.solve(&rhs).and_then(|s| refine(&lu, s))
        })?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xs = sol.rows(0, n).into_owned();
    let mut ys = DVector::zeros(y.len());
    for (r, &i) in rows.iter().enumerate() {
        let v = sol[n + r];
        // dual sign consistency
        if sc.l[i] != sc.u[i] && ((active[i] < 0 && v > 0.0) || (active[i] > 0 && v < 0.0)) {
            if v.abs() > 1e-9 * (1.0 + inf_norm(&sc.q)) {
                return None;
            }
        }
        ys[i] = v;
    }
    let xu = xs.component_mul(&sc.s.d);
    let yu = ys.component_mul(&sc.s.e) / sc.s.c;
    let ax = &prob.a * &xu;
    let zu = project(&ax, &prob.l, &prob.u);
    let r = residuals(prob, &xu, &yu, &zu, st);
    if !r.converged() {
        return None;
    }
    Some(QpSolution {
        x: xu,
        y: yu,
        status: QpStatus::Solved,
        iterations: it,
        primal_residual: r.prim,
        dual_residual: r.dual,
        polished: true,
    })
}

/// Box-constrained strictly convex QP `min ½xᵀPx + qᵀx  s.t.  lb ≤ x ≤ ub`
/// by a primal active-set method.
///
/// Dense and exact (finite termination), so ill-conditioning that slows
/// ADMM does not affect it. `active` seeds the working set (`-1` lower,
/// `1` upper, `0` free) and receives the final one. `y` follows the ADMM
/// sign convention (`Px + q + y = 0` at the solution). A multiplier is
/// treated as wrong-signed only beyond `tol · (1 + ‖q‖∞)`.
pub fn solve_box(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    active: &mut Vec<i8>,
) -> QpSolution {
    let n = q.len();
    let tol = tol * (1.0 + q.amax());
    if active.len() != n {
        *active = vec![0; n];
    }
    for i in 0..n {
        if lb[i] == ub[i] && active[i] == 0 {
            active[i] = -1;
        }
        if (active[i] == -1 && !lb[i].is_finite()) || (active[i] == 1 && !ub[i].is_finite()) {
            active[i] = 0;
        }
    }
    let mut x = DVector::from_fn(n, |i, _| match active[i] {
        -1 => lb[i],
        1 => ub[i],
        _ => 0.0_f64.clamp(lb[i], ub[i]),
    });
    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let free: Vec<usize> = (0..n).filter(|&i| active[i] == 0).collect();
        let mut target = x.clone();
        if !free.is_empty() {
            let g = p * &x + q;
            let hff = p.select_rows(&free).select_columns(&free);
            let Some(ch) = Cholesky::new(hff) else {
                return failed(n, n, QpStatus::DualInfeasible);
            };
            let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            let step = ch.solve(&(-gf));
            for (k, &i) in free.iter().enumerate() {
                target[i] += step[k];
            }
        }
        // Longest feasible fraction of the step toward the subspace minimizer.
        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &free {
            let d = target[i] - x[i];
            let room = if d > 0.0 { ub[i] - x[i] } else { lb[i] - x[i] };
            if d != 0.0 && room / d < alpha {
                alpha = (room / d).max(0.0);
                blocking = Some((i, if d > 0.0 { 1 } else { -1 }));
            }
        }
        for &i in &free {
            x[i] += alpha * (target[i] - x[i]);
        }
        if let Some((i, side)) = blocking {
            active[i] = side;
            x[i] = if side > 0 { ub[i] } else { lb[i] };
            continue;
        }
        let g = p * &x + q;
        let worst = (0..n)
            .filter(|&i| active[i] != 0 && lb[i] != ub[i])
            .map(|i| (i, if active[i] < 0 { -g[i] } else { g[i] }))
            .filter(|&(_, v)| v > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, _)) => active[i] = 0,
            None => {
                status = QpStatus::Solved;
                break;
            }
        }
    }
    let g = p * &x + q;
    let stat = (0..n).filter(|&i| active[i] == 0).map(|i| g[i].abs()).fold(0.0, f64::max);
    QpSolution { y: -g, x, status, iterations, primal_residual: 0.0, dual_residual: stat, polished: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_unconstrained() {
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -1.0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DVector::zeros(0),
        )
        .unwrap();
        let s = solve(&prob, 1e-8, 4000);
        assert!(s.is_solved());
        assert!((s.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn halfspace_projection() {
        let n = 4;
        let mut a = DMatrix::zeros(1, n);
        a[(0, 0)] = 1.0;
        let prob = QpProblem::new(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            a,
            DVector::from_element(1, 1.0),
            DVector::from_element(1, f64::INFINITY),
        )
        .unwrap();
        let s = solve(&prob, 1e-8, 4000);
        assert!(s.is_solved());
        assert!((s.x[0] - 1.0).abs() < 1e-8);
        assert!(s.x.rows(1, n - 1).amax() < 1e-8);
        assert!(s.y[0] < 0.0);
    }

    #[test]
    fn equality_constrained() {
        // min x² + y² s.t. x + y = 1
        let prob = QpProblem::new(
            DMatrix::identity(2, 2) * 2.0,
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let s = solve(&prob, 1e-8, 4000);
        assert!(s.is_solved());
        assert!((s.x[0] - 0.5).abs() < 1e-8 && (s.x[1] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x ≥ 1 and x ≤ 0
        let prob = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            DVector::from_vec(vec![f64::INFINITY, 0.0]),
        )
        .unwrap();
        let s = solve(&prob, 1e-8, 4000);
        assert_eq!(s.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn detects_dual_infeasibility() {
        // min -x, x ≥ 0
        let prob = QpProblem::new(
            DMatrix::zeros(1, 1),
            DVector::from_element(1, -1.0),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DVector::from_element(1, f64::INFINITY),
        )
        .unwrap();
        let s = solve(&prob, 1e-8, 4000);
        assert_eq!(s.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn rejects_malformed_problems() {
        let bad = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DVector::zeros(0),
        );
        assert!(matches!(bad, Err(QpError::Asymmetric(_))));
        let bad = QpProblem::with_box(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
        );
        assert!(matches!(bad, Err(QpError::InvertedBounds { row: 0, .. })));
    }

    #[test]
    fn max_iter_reports_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(6, 6, |_, _| rng.gen_range(-1.0..1.0));
        let prob = QpProblem::with_box(
            &m * m.transpose() + DMatrix::identity(6, 6) * 1e-3,
            DVector::from_fn(6, |_, _| rng.gen_range(-10.0..10.0)),
            DVector::from_element(6, -1.0),
            DVector::from_element(6, 1.0),
        )
        .unwrap();
        let st = QpSettings { max_iter: 1, polish: false, ..QpSettings::default() };
        let s = QpSolver::new(st).solve(&prob);
        assert_eq!(s.status, QpStatus::MaxIterations);
        assert!(s.primal_residual.is_finite() && s.dual_residual.is_finite());
    }

    #[test]
    fn warm_start_on_repeated_problem_does_not_cost_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let m = DMatrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
            let prob = QpProblem::with_box(
                &m * m.transpose() + DMatrix::identity(8, 8) * 0.1,
                DVector::from_fn(8, |_, _| rng.gen_range(-5.0..5.0)),
                DVector::from_element(8, -0.5),
                DVector::from_element(8, 0.5),
            )
            .unwrap();
            let mut solver = QpSolver::default();
            let cold = solver.solve(&prob);
            let warm = solver.solve(&prob);
            assert!(cold.is_solved() && warm.is_solved());
            assert!(warm.iterations <= cold.iterations);
            assert!((warm.x - cold.x).amax() < 1e-8);
        }
    }

    #[test]
    fn matrix_market_dump_round_trips() {
        let prob = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 2.0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qp.mtx");
        prob.write_matrix_market(&path).unwrap();
        assert_eq!(QpProblem::read_matrix_market(&path).unwrap(), prob);
    }
}
