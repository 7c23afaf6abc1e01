//! Affine-in-parameter reformulation of the multirotor model.
//!
//! The lifted parameter vector `ϑ` enters the dynamics linearly:
//! `ẋ = ℱ(x) + 𝒢(x, u) ϑ`. It is an exact re-parameterization of `θ`, so
//! `ℱ(x) + 𝒢(x, u)·relax(θ) = f(x, u, θ)` for every valid `θ`.
//!
//! Flattened layout: `[𝓂, 𝒶₁..₃, 𝒹₁..ₘ, 𝒸₁..ₘ, 𝒷₁..ₘ, 𝓘ₓₓ, 𝓘ᵧᵧ, 𝓘zz]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attitude::{
    cross, normalize_quaternion_block, quaternion_rate, rotate, rotate_transpose_const,
    rotation_kernel,
};
use crate::dynamics::{
    param_dim, ControlInput, DynamicsError, NominalParams, State, StateVector, GRAVITY, STATE_DIM,
};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelaxationError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid parameter box at component {index}: lower {lower} > upper {upper}")]
    InvalidBox { index: usize, lower: f64, upper: f64 },
    #[error("parameter box must lie in nominal space with positive mass and inertia lower bounds")]
    NonPositiveDivisor,
    #[error("parameter box is in {found:?} space, expected {expected:?}")]
    WrongSpace { expected: ParamSpace, found: ParamSpace },
}

/// Relaxed parameters `ϑ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedParams {
    /// `1/μ`
    pub inv_mass: f64,
    /// `a/μ`
    pub drag_rate: [f64; 3],
    /// `d/I_xx`
    pub roll_gain: Vec<f64>,
    /// `c/I_yy`
    pub pitch_gain: Vec<f64>,
    /// `b/I_zz`
    pub yaw_gain: Vec<f64>,
    /// `((I_zz−I_yy)/I_xx, (I_xx−I_zz)/I_yy, (I_yy−I_xx)/I_zz)`
    pub inertia_ratio: [f64; 3],
}

impl RelaxedParams {
    pub fn rotors(&self) -> usize {
        self.roll_gain.len()
    }

    pub fn dim(&self) -> usize {
        param_dim(self.rotors())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.push(self.inv_mass);
        out.extend_from_slice(&self.drag_rate);
        out.extend_from_slice(&self.roll_gain);
        out.extend_from_slice(&self.pitch_gain);
        out.extend_from_slice(&self.yaw_gain);
        out.extend_from_slice(&self.inertia_ratio);
        out
    }

    pub fn from_slice(m: usize, v: &[f64]) -> Result<Self, DynamicsError> {
        if v.len() != param_dim(m) {
            return Err(DynamicsError::DimensionMismatch { expected: param_dim(m), got: v.len() });
        }
        Ok(Self {
            inv_mass: v[0],
            drag_rate: [v[1], v[2], v[3]],
            roll_gain: v[4..4 + m].to_vec(),
            pitch_gain: v[4 + m..4 + 2 * m].to_vec(),
            yaw_gain: v[4 + 2 * m..4 + 3 * m].to_vec(),
            inertia_ratio: [v[4 + 3 * m], v[5 + 3 * m], v[6 + 3 * m]],
        })
    }

    /// Per-rotor thrust that balances gravity at level attitude.
    pub fn hover_thrust(&self, gravity: &[f64; 3]) -> f64 {
        crate::dynamics::norm3(gravity) / (self.inv_mass * self.rotors() as f64)
    }

    pub fn labels(m: usize) -> Vec<String> {
        let mut out = vec!["inv_mass".to_string()];
        out.extend(["drag_rate_x", "drag_rate_y", "drag_rate_z"].iter().map(|s| s.to_string()));
        for prefix in ["roll_gain", "pitch_gain", "yaw_gain"] {
            out.extend((1..=m).map(|i| format!("{prefix}{i}")));
        }
        out.extend(["inertia_ratio_x", "inertia_ratio_y", "inertia_ratio_z"].iter().map(|s| s.to_string()));
        out
    }
}

/// Change of variables `θ ↦ ϑ`.
pub fn relax(theta: &NominalParams) -> Result<RelaxedParams, DynamicsError> {
    theta.validate()?;
    Ok(relax_unchecked(theta))
}

fn relax_unchecked(theta: &NominalParams) -> RelaxedParams {
    let mu = theta.mass;
    let [ixx, iyy, izz] = theta.inertia;
    RelaxedParams {
        inv_mass: 1.0 / mu,
        drag_rate: theta.drag.map(|a| a / mu),
        roll_gain: theta.rotor_y.iter().map(|d| d / ixx).collect(),
        pitch_gain: theta.rotor_x.iter().map(|c| c / iyy).collect(),
        yaw_gain: theta.torque_ratio.iter().map(|b| b / izz).collect(),
        inertia_ratio: [(izz - iyy) / ixx, (ixx - izz) / iyy, (iyy - ixx) / izz],
    }
}

// ---------------------------------------------------------------------------
// Generic kernels

/// `ℱ(x) + 𝒢(x, u) ϑ` on a flattened relaxed vector.
pub(crate) fn affine_rate<S: Scalar>(
    x: &[S; STATE_DIM],
    u: &[S],
    vartheta: &[S],
    g: &[f64; 3],
) -> [S; STATE_DIM] {
    let mut f = drift_kernel(x, g);
    add_input_term(&mut f, x, u, vartheta);
    f
}

pub(crate) fn drift_kernel<S: Scalar>(x: &[S; STATE_DIM], g: &[f64; 3]) -> [S; STATE_DIM] {
    let q = [x[3], x[4], x[5], x[6]];
    let v = [x[7], x[8], x[9]];
    let w = [x[10], x[11], x[12]];
    let r = rotation_kernel(&q);
    let pdot = rotate(&r, &v);
    let qdot = quaternion_rate(&q, &w);
    let gb = rotate_transpose_const(&r, g);
    let wxv = cross(&w, &v);
    [
        pdot[0],
        pdot[1],
        pdot[2],
        qdot[0],
        qdot[1],
        qdot[2],
        qdot[3],
        gb[0] - wxv[0],
        gb[1] - wxv[1],
        gb[2] - wxv[2],
        S::zero(),
        S::zero(),
        S::zero(),
    ]
}

/// Accumulates `𝒢(x, u) ϑ` into `f` without materializing `𝒢`.
fn add_input_term<S: Scalar>(f: &mut [S; STATE_DIM], x: &[S; STATE_DIM], u: &[S], th: &[S]) {
    let m = u.len();
    debug_assert_eq!(th.len(), param_dim(m));
    let mut thrust = S::zero();
    for &ui in u {
        thrust += ui;
    }
    f[7] -= x[7] * th[1];
    f[8] -= x[8] * th[2];
    f[9] += thrust * th[0] - x[9] * th[3];

    let (roll, pitch, yaw) = (&th[4..4 + m], &th[4 + m..4 + 2 * m], &th[4 + 2 * m..4 + 3 * m]);
    let ratio = &th[4 + 3 * m..7 + 3 * m];
    let (wx, wy, wz) = (x[10], x[11], x[12]);
    let mut tx = S::zero();
    let mut ty = S::zero();
    let mut tz = S::zero();
    for i in 0..m {
        tx += u[i] * roll[i];
        ty -= u[i] * pitch[i];
        if i % 2 == 0 {
            tz -= u[i] * yaw[i];
        } else {
            tz += u[i] * yaw[i];
        }
    }
    f[10] += tx - wy * wz * ratio[0];
    f[11] += ty - wx * wz * ratio[1];
    f[12] += tz - wx * wy * ratio[2];
}

// ---------------------------------------------------------------------------
// Public operations

/// Drift term `ℱ(x)` under standard gravity.
pub fn drift(x: &State) -> StateVector {
    drift_with_gravity(x, &GRAVITY)
}

pub fn drift_with_gravity(x: &State, gravity: &[f64; 3]) -> StateVector {
    StateVector::from(drift_kernel(&x.to_array(), gravity))
}

/// Input/regressor matrix `𝒢(x, u)`, 13 × (7+3m).
pub fn input_matrix(x: &State, u: &ControlInput) -> DMatrix<f64> {
    let m = u.rotors();
    let mut g = DMatrix::zeros(STATE_DIM, param_dim(m));
    let thrust: f64 = u.as_slice().iter().sum();
    // v̇ rows: [Ku, −𝒜(x), 0]
    g[(9, 0)] = thrust;
    g[(7, 1)] = -x.v.x;
    g[(8, 2)] = -x.v.y;
    g[(9, 3)] = -x.v.z;
    // ω̇ rows: [0, ℬ(u), −ℐ(x)]
    for (i, &ui) in u.as_slice().iter().enumerate() {
        g[(10, 4 + i)] = ui;
        g[(11, 4 + m + i)] = -ui;
        g[(12, 4 + 2 * m + i)] = if i % 2 == 0 { -ui } else { ui };
    }
    let w = x.omega;
    g[(10, 4 + 3 * m)] = -w.y * w.z;
    g[(11, 5 + 3 * m)] = -w.x * w.z;
    g[(12, 6 + 3 * m)] = -w.x * w.y;
    g
}

/// `x + dt·(ℱ(x) + 𝒢(x,u)ϑ + w)` before quaternion renormalization.
pub fn affine_euler_unnormalized(
    x: &State,
    u: &ControlInput,
    vartheta: &[f64],
    w: &[f64; STATE_DIM],
    dt: f64,
) -> StateVector {
    let xa = x.to_array();
    let f = affine_rate(&xa, u.as_slice(), vartheta, &GRAVITY);
    StateVector::from_fn(|i, _| xa[i] + dt * (f[i] + w[i]))
}

/// One forward-Euler step of the affine model, quaternion renormalized.
pub fn affine_euler_step(
    x: &State,
    u: &ControlInput,
    vartheta: &RelaxedParams,
    w: &[f64; STATE_DIM],
    dt: f64,
) -> State {
    let next = affine_euler_unnormalized(x, u, &vartheta.to_vec(), w, dt);
    let mut a: [f64; STATE_DIM] = next.into();
    normalize_quaternion_block(&mut a);
    State::from_array(&a)
}

// ---------------------------------------------------------------------------
// Parameter boxes

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSpace {
    Nominal,
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub space: ParamSpace,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, space: ParamSpace) -> Result<Self, RelaxationError> {
        assert_eq!(lower.len(), upper.len(), "box bound lengths differ");
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !(l <= u) {
                return Err(RelaxationError::InvalidBox { index: i, lower: l, upper: u });
            }
        }
        Ok(Self { lower, upper, space })
    }

    /// `[min(lo·θ₀, hi·θ₀), max(lo·θ₀, hi·θ₀)]` componentwise, so negative
    /// nominal entries keep a well-ordered interval.
    pub fn from_factors(theta0: &NominalParams, lo: f64, hi: f64) -> Result<Self, RelaxationError> {
        let v = theta0.to_vec();
        let lower = v.iter().map(|t| (lo * t).min(hi * t)).collect();
        let upper = v.iter().map(|t| (lo * t).max(hi * t)).collect();
        Self::new(lower, upper, ParamSpace::Nominal)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dim()
            && v.iter().zip(&self.lower).zip(&self.upper).all(|((x, l), u)| *l <= *x && *x <= *u)
    }

    pub fn clamp(&self, v: &mut [f64]) {
        for ((x, l), u) in v.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*l, *u);
        }
    }
}

fn extremes(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    values.into_iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Widens an interval by a few ulps so rounding in `relax` cannot escape it.
fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    let pad = 8.0 * f64::EPSILON * lo.abs().max(hi.abs());
    (lo - pad, hi + pad)
}

/// Maps a nominal-space box to a sound box on the relaxed parameters.
///
/// Quotient components `n/d` with `d > 0` take their extremes at interval
/// endpoints; the inertia ratios `(Iⱼ − Iₖ)/Iᵢ` are enumerated over all
/// eight corners since the numerator may change sign inside the box.
pub fn transform_bounds(
    bounds: &ParamBox,
    theta0: &NominalParams,
) -> Result<ParamBox, RelaxationError> {
    if bounds.space != ParamSpace::Nominal {
        return Err(RelaxationError::WrongSpace { expected: ParamSpace::Nominal, found: bounds.space });
    }
    let m = theta0.rotors();
    if bounds.dim() != param_dim(m) {
        return Err(DynamicsError::DimensionMismatch { expected: param_dim(m), got: bounds.dim() }.into());
    }
    for (i, (&l, &u)) in bounds.lower.iter().zip(&bounds.upper).enumerate() {
        if !(l <= u) {
            return Err(RelaxationError::InvalidBox { index: i, lower: l, upper: u });
        }
    }
    let (lo, hi) = (&bounds.lower, &bounds.upper);
    if lo[..4].iter().any(|&v| !(v > 0.0)) {
        return Err(RelaxationError::NonPositiveDivisor);
    }
    let iv = |i: usize| [lo[i], hi[i]];
    let quotient = |n: usize, d: usize| {
        widen(extremes(iv(n).into_iter().flat_map(|a| iv(d).into_iter().map(move |b| a / b))))
    };

    let mut out: Vec<(f64, f64)> = Vec::with_capacity(param_dim(m));
    out.push(widen((1.0 / hi[0], 1.0 / lo[0])));
    for k in 0..3 {
        out.push(quotient(4 + k, 0));
    }
    // roll gains d/I_xx, pitch gains c/I_yy, yaw gains b/I_zz
    for i in 0..m {
        out.push(quotient(7 + 2 * m + i, 1));
    }
    for i in 0..m {
        out.push(quotient(7 + m + i, 2));
    }
    for i in 0..m {
        out.push(quotient(7 + i, 3));
    }
    let mut corners = Vec::with_capacity(8);
    for ixx in iv(1) {
        for iyy in iv(2) {
            for izz in iv(3) {
                corners.push([(izz - iyy) / ixx, (ixx - izz) / iyy, (iyy - ixx) / izz]);
            }
        }
    }
    for k in 0..3 {
        out.push(widen(extremes(corners.iter().map(|c| c[k]))));
    }
    let (lower, upper) = out.into_iter().unzip();
    ParamBox::new(lower, upper, ParamSpace::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{derivative, euler_step, ModelSpec};
    use nalgebra::{DVector, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut impl Rng) -> State {
        let q = crate::attitude::Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let mut v3 = |s: f64| Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
        State { p: v3(5.0), q, v: v3(3.0), omega: v3(3.0) }
    }

    #[test]
    fn crazyflie_relaxed_values() {
        let r = relax(&ModelSpec::crazyflie().params).unwrap();
        assert!((r.inv_mass - 37.037037037037).abs() < 1e-9);
        assert!((r.inertia_ratio[2] - (-1.843e-2)).abs() < 1e-5);
        assert_eq!(r.dim(), 19);
        let mut sym = ModelSpec::crazyflie().params;
        sym.inertia = [2e-5; 3];
        assert_eq!(relax(&sym).unwrap().inertia_ratio, [0.0; 3]);
        sym.mass = -1.0;
        assert!(relax(&sym).is_err());
    }

    #[test]
    fn drift_at_hover_is_gravity_only() {
        let f = drift(&State::hover());
        let mut expect = StateVector::zeros();
        expect[9] = -9.81;
        assert_eq!(f, expect);
    }

    #[test]
    fn affine_form_reproduces_nonlinear_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for spec in [ModelSpec::crazyflie(), ModelSpec::fusion1()] {
            let vt = relax(&spec.params).unwrap();
            let vtv = DVector::from_vec(vt.to_vec());
            for _ in 0..2000 {
                let x = random_state(&mut rng);
                let u = ControlInput((0..4).map(|_| rng.gen_range(0.0..spec.u_max)).collect());
                let lhs = drift(&x) + input_matrix(&x, &u) * &vtv;
                let rhs = derivative(&x, &u, &spec.params).unwrap();
                let scale = 1.0 + rhs.abs().max();
                assert!((lhs - rhs).abs().max() <= 1e-10 * scale);
                let fused = affine_rate(&x.to_array(), u.as_slice(), &vt.to_vec(), &GRAVITY);
                assert!((StateVector::from(fused) - rhs).abs().max() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn input_matrix_shape_and_zero_case() {
        let z = State { q: crate::attitude::Quaternion::identity(), ..State::hover() };
        let g = input_matrix(&z, &ControlInput::uniform(4, 0.0));
        assert_eq!(g.shape(), (13, 19));
        assert_eq!(g.abs().max(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random_state(&mut rng);
        let g = input_matrix(&x, &ControlInput::uniform(4, 0.1));
        assert_eq!(g.rows(0, 7).abs().max(), 0.0);
        assert_eq!(drift(&x).rows(10, 3).abs().max(), 0.0);
    }

    #[test]
    fn affine_euler_matches_nonlinear_euler_and_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = ModelSpec::crazyflie();
        let vt = relax(&spec.params).unwrap();
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let u = ControlInput((0..4).map(|_| rng.gen_range(0.0..spec.u_max)).collect());
            let a = affine_euler_step(&x, &u, &vt, &[0.0; 13], 0.02);
            let b = euler_step(&x, &u, &spec.params, 0.02).unwrap();
            assert!((a.to_vector() - b.to_vector()).abs().max() < 1e-12 * (1.0 + b.to_vector().abs().max()));

            let t1: Vec<f64> = (0..19).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let t2: Vec<f64> = (0..19).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let t12: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
            let w = [0.01; 13];
            let s1 = affine_euler_unnormalized(&x, &u, &t1, &w, 0.02);
            let s2 = affine_euler_unnormalized(&x, &u, &t2, &w, 0.02);
            let s0 = affine_euler_unnormalized(&x, &u, &[0.0; 19], &w, 0.02);
            let s12 = affine_euler_unnormalized(&x, &u, &t12, &w, 0.02);
            assert!((s1 + s2 - s0 - s12).abs().max() < 1e-12 * (1.0 + s12.abs().max()));
            assert_eq!(affine_euler_step(&x, &u, &vt, &w, 0.0), x);
        }
    }

    #[test]
    fn factor_box_orders_negative_entries() {
        let th = ModelSpec::crazyflie().params;
        let b = ParamBox::from_factors(&th, 0.5, 1.5).unwrap();
        assert!(b.lower.iter().zip(&b.upper).all(|(l, u)| l <= u));
        assert!(b.contains(&th.to_vec()));
        // c₃ is negative
        assert!((b.lower[7 + 4 + 2] + 1.5 * 2.83e-2).abs() < 1e-15);
    }

    #[test]
    fn transformed_mass_and_drag_bounds() {
        let th = ModelSpec::crazyflie().params;
        let b = transform_bounds(&ParamBox::from_factors(&th, 0.5, 1.5).unwrap(), &th).unwrap();
        assert_eq!(b.space, ParamSpace::Relaxed);
        assert!((b.lower[0] - 1.0 / (1.5 * 2.70e-2)).abs() < 1e-9);
        assert!((b.upper[0] - 1.0 / (0.5 * 2.70e-2)).abs() < 1e-9);
        assert!((b.lower[0] - 24.69).abs() < 5e-3 && (b.upper[0] - 74.07).abs() < 5e-3);
        let axx = (0.5 * 1.00e-2 / (1.5 * 2.70e-2), 1.5 * 1.00e-2 / (0.5 * 2.70e-2));
        assert!((b.lower[1] - axx.0).abs() < 1e-12 && (b.upper[1] - axx.1).abs() < 1e-12);
    }

    #[test]
    fn transformed_box_is_sound() {
        for spec in [ModelSpec::crazyflie(), ModelSpec::fusion1()] {
            let th = spec.params.clone();
            let nb = ParamBox::from_factors(&th, 0.5, 1.5).unwrap();
            let rb = transform_bounds(&nb, &th).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            for _ in 0..20_000 {
                let v: Vec<f64> =
                    nb.lower.iter().zip(&nb.upper).map(|(l, u)| rng.gen_range(*l..=*u)).collect();
                let r = relax(&NominalParams::from_slice(4, &v).unwrap()).unwrap();
                assert!(rb.contains(&r.to_vec()));
            }
        }
    }

    #[test]
    fn transform_rejects_bad_boxes() {
        let th = ModelSpec::crazyflie().params;
        let mut nb = ParamBox::from_factors(&th, 0.5, 1.5).unwrap();
        nb.lower[0] = 0.0;
        assert_eq!(transform_bounds(&nb, &th), Err(RelaxationError::NonPositiveDivisor));
        let mut nb = ParamBox::from_factors(&th, 0.5, 1.5).unwrap();
        nb.lower[5] = 1.0;
        assert!(matches!(transform_bounds(&nb, &th), Err(RelaxationError::InvalidBox { index: 5, .. })));
    }

    #[test]
    fn relaxed_round_trip_and_hover() {
        let vt = relax(&ModelSpec::fusion1().params).unwrap();
        assert_eq!(RelaxedParams::from_slice(4, &vt.to_vec()).unwrap(), vt);
        let h = vt.hover_thrust(&GRAVITY);
        assert!((h - ModelSpec::fusion1().hover_thrust()).abs() < 1e-12);
        assert_eq!(RelaxedParams::labels(4).len(), 19);
    }
}
