//! Nonlinear multirotor rigid-body dynamics and their discretizations.
//!
//! The flattened state ordering is `(p, q, v, ω)`: inertial position,
//! attitude quaternion, body-frame linear velocity, body-frame angular
//! velocity. Parameter vectors are flattened as
//! `[μ, I_xx, I_yy, I_zz, A_xx, A_yy, A_zz, b₁..bₘ, c₁..cₘ, d₁..dₘ]`.

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attitude::{
    cross, normalize_quaternion_block, quaternion_rate, rotate, rotate_transpose_const,
    rotation_kernel, Quaternion,
};
use crate::scalar::Scalar;

pub const STATE_DIM: usize = 13;

/// Inertial-frame gravity, z-up world.
pub const GRAVITY: [f64; 3] = [0.0, 0.0, -9.81];

pub type StateVector = SVector<f64, STATE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: String, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p: Vector3<f64>,
    pub q: Quaternion,
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
}

impl Default for State {
    fn default() -> Self {
        Self::hover()
    }
}

impl State {
    /// Origin, identity attitude, at rest.
    pub fn hover() -> Self {
        Self {
            p: Vector3::zeros(),
            q: Quaternion::identity(),
            v: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn from_array(a: &[f64; STATE_DIM]) -> Self {
        Self {
            p: Vector3::new(a[0], a[1], a[2]),
            q: Quaternion::new(a[3], a[4], a[5], a[6]),
            v: Vector3::new(a[7], a[8], a[9]),
            omega: Vector3::new(a[10], a[11], a[12]),
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.p.x,
            self.p.y,
            self.p.z,
            self.q.w,
            self.q.x,
            self.q.y,
            self.q.z,
            self.v.x,
            self.v.y,
            self.v.z,
            self.omega.x,
            self.omega.y,
            self.omega.z,
        ]
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::from(self.to_array())
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Per-rotor thrust forces [N].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput(pub Vec<f64>);

impl ControlInput {
    pub fn uniform(m: usize, thrust: f64) -> Self {
        Self(vec![thrust; m])
    }

    pub fn rotors(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Physical parameters `θ`.
///
/// `rotor_x` holds the horizontal (`c`) rotor positions entering the pitch
/// torque, `rotor_y` the vertical (`d`) positions entering the roll torque.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalParams {
    pub mass: f64,
    pub inertia: [f64; 3],
    pub drag: [f64; 3],
    pub torque_ratio: Vec<f64>,
    pub rotor_x: Vec<f64>,
    pub rotor_y: Vec<f64>,
}

impl NominalParams {
    pub fn rotors(&self) -> usize {
        self.torque_ratio.len()
    }

    pub fn dim(&self) -> usize {
        param_dim(self.rotors())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.push(self.mass);
        out.extend_from_slice(&self.inertia);
        out.extend_from_slice(&self.drag);
        out.extend_from_slice(&self.torque_ratio);
        out.extend_from_slice(&self.rotor_x);
        out.extend_from_slice(&self.rotor_y);
        out
    }

    pub fn from_slice(m: usize, v: &[f64]) -> Result<Self, DynamicsError> {
        if v.len() != param_dim(m) {
            return Err(DynamicsError::DimensionMismatch { expected: param_dim(m), got: v.len() });
        }
        Ok(Self {
            mass: v[0],
            inertia: [v[1], v[2], v[3]],
            drag: [v[4], v[5], v[6]],
            torque_ratio: v[7..7 + m].to_vec(),
            rotor_x: v[7 + m..7 + 2 * m].to_vec(),
            rotor_y: v[7 + 2 * m..7 + 3 * m].to_vec(),
        })
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let m = self.rotors();
        if self.rotor_x.len() != m || self.rotor_y.len() != m {
            return Err(DynamicsError::DimensionMismatch {
                expected: m,
                got: self.rotor_x.len().min(self.rotor_y.len()),
            });
        }
        check_positive("mass", self.mass)?;
        for (name, v) in ["Ixx", "Iyy", "Izz"].iter().zip(self.inertia) {
            check_positive(name, v)?;
        }
        for (name, v) in ["Axx", "Ayy", "Azz"].iter().zip(self.drag) {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DynamicsError::InvalidParameter { name: name.to_string(), value: v });
            }
        }
        Ok(())
    }

    /// Per-rotor thrust that balances gravity at level attitude.
    pub fn hover_thrust(&self, gravity: &[f64; 3]) -> f64 {
        self.mass * norm3(gravity) / self.rotors() as f64
    }

    /// Labels of the flattened parameter vector, matching config keys.
    pub fn labels(m: usize) -> Vec<String> {
        let mut out: Vec<String> =
            ["mu", "Ixx", "Iyy", "Izz", "Axx", "Ayy", "Azz"].iter().map(|s| s.to_string()).collect();
        for prefix in ["b", "c", "d"] {
            out.extend((1..=m).map(|i| format!("{prefix}{i}")));
        }
        out
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), DynamicsError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DynamicsError::InvalidParameter { name: name.to_string(), value: v })
    }
}

pub(crate) fn norm3(g: &[f64; 3]) -> f64 {
    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
}

/// `7 + 3m`.
pub const fn param_dim(m: usize) -> usize {
    7 + 3 * m
}

/// A named vehicle: nominal parameters plus simulation constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub params: NominalParams,
    pub gravity: [f64; 3],
    pub u_max: f64,
}

/// Ceiling on per-rotor thrust as a multiple of nominal hover thrust.
pub const DEFAULT_THRUST_MARGIN: f64 = 2.5;

impl ModelSpec {
    pub fn new(name: &str, params: NominalParams) -> Self {
        let u_max = DEFAULT_THRUST_MARGIN * params.hover_thrust(&GRAVITY);
        Self { name: name.to_string(), params, gravity: GRAVITY, u_max }
    }

    /// Crazyflie nano-quadrotor.
    pub fn crazyflie() -> Self {
        let l = 2.83e-2;
        Self::new(
            "crazyflie",
            NominalParams {
                mass: 2.70e-2,
                inertia: [1.44e-5, 1.40e-5, 2.17e-5],
                drag: [1.00e-2, 1.00e-2, 5.00e-2],
                torque_ratio: vec![2.51e-2; 4],
                rotor_x: vec![l, l, -l, -l],
                rotor_y: vec![l, -l, -l, l],
            },
        )
    }

    /// Fusion 1 quadrotor.
    pub fn fusion1() -> Self {
        let l = 6.35e-2;
        Self::new(
            "fusion1",
            NominalParams {
                mass: 2.50e-1,
                inertia: [4.27e-4, 6.09e-4, 1.50e-3],
                drag: [2.00e-2, 2.00e-2, 8.00e-2],
                torque_ratio: vec![1.11e-2; 4],
                rotor_x: vec![l, l, -l, -l],
                rotor_y: vec![l, -l, -l, l],
            },
        )
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "crazyflie" => Some(Self::crazyflie()),
            "fusion1" | "fusion_1" | "fusion-1" => Some(Self::fusion1()),
            _ => None,
        }
    }

    pub fn rotors(&self) -> usize {
        self.params.rotors()
    }

    pub fn hover_thrust(&self) -> f64 {
        self.params.hover_thrust(&self.gravity)
    }
}

/// Which state channels receive additive process noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceChannels {
    /// Position, linear velocity and angular velocity (10 channels).
    #[default]
    PositionVelocityRate,
    /// All 13 channels, quaternion included (followed by renormalization).
    Full,
}

impl DisturbanceChannels {
    pub fn mask(self) -> [bool; STATE_DIM] {
        let mut m = [true; STATE_DIM];
        if self == Self::PositionVelocityRate {
            m[3..7].iter_mut().for_each(|b| *b = false);
        }
        m
    }
}

// ---------------------------------------------------------------------------
// Generic kernels

/// Continuous-time rate `f(x, u, θ)` on a flattened parameter vector.
pub(crate) fn nominal_rate<S: Scalar>(
    x: &[S; STATE_DIM],
    u: &[S],
    theta: &[S],
    g: &[f64; 3],
) -> [S; STATE_DIM] {
    let m = u.len();
    debug_assert_eq!(theta.len(), param_dim(m));
    let q = [x[3], x[4], x[5], x[6]];
    let v = [x[7], x[8], x[9]];
    let w = [x[10], x[11], x[12]];
    let r = rotation_kernel(&q);

    let mass = theta[0];
    let inertia = [theta[1], theta[2], theta[3]];
    let drag = [theta[4], theta[5], theta[6]];
    let b = &theta[7..7 + m];
    let c = &theta[7 + m..7 + 2 * m];
    let d = &theta[7 + 2 * m..7 + 3 * m];

    let pdot = rotate(&r, &v);
    let qdot = quaternion_rate(&q, &w);

    let gb = rotate_transpose_const(&r, g);
    let wxv = cross(&w, &v);
    let mut thrust = S::zero();
    for &ui in u {
        thrust += ui;
    }
    let force = [-(drag[0] * v[0]), -(drag[1] * v[1]), thrust - drag[2] * v[2]];
    let vdot: [S; 3] = std::array::from_fn(|i| gb[i] + force[i] / mass - wxv[i]);

    let mut torque = [S::zero(); 3];
    for i in 0..m {
        torque[0] += d[i] * u[i];
        torque[1] -= c[i] * u[i];
        if i % 2 == 0 {
            torque[2] -= b[i] * u[i];
        } else {
            torque[2] += b[i] * u[i];
        }
    }
    let jw = [inertia[0] * w[0], inertia[1] * w[1], inertia[2] * w[2]];
    let gyro = cross(&w, &jw);
    let wdot: [S; 3] = std::array::from_fn(|i| (torque[i] - gyro[i]) / inertia[i]);

    [
        pdot[0], pdot[1], pdot[2], qdot[0], qdot[1], qdot[2], qdot[3], vdot[0], vdot[1], vdot[2],
        wdot[0], wdot[1], wdot[2],
    ]
}

/// Classic RK4 over `rate` followed by quaternion renormalization.
pub(crate) fn rk4_kernel<S: Scalar>(
    x: &[S; STATE_DIM],
    dt: f64,
    rate: impl Fn(&[S; STATE_DIM]) -> [S; STATE_DIM],
) -> [S; STATE_DIM] {
    let shifted = |k: &[S; STATE_DIM], h: f64| -> [S; STATE_DIM] {
        std::array::from_fn(|i| x[i] + k[i] * h)
    };
    let k1 = rate(x);
    let k2 = rate(&shifted(&k1, 0.5 * dt));
    let k3 = rate(&shifted(&k2, 0.5 * dt));
    let k4 = rate(&shifted(&k3, dt));
    let mut out: [S; STATE_DIM] = std::array::from_fn(|i| {
        x[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0)
    });
    normalize_quaternion_block(&mut out);
    out
}

fn check_input(u: &ControlInput, theta: &NominalParams) -> Result<(), DynamicsError> {
    theta.validate()?;
    if u.rotors() != theta.rotors() {
        return Err(DynamicsError::DimensionMismatch { expected: theta.rotors(), got: u.rotors() });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Public operations

/// Continuous-time dynamics `f(x, u, θ)` under standard gravity.
pub fn derivative(
    x: &State,
    u: &ControlInput,
    theta: &NominalParams,
) -> Result<StateVector, DynamicsError> {
    derivative_with_gravity(x, u, theta, &GRAVITY)
}

pub fn derivative_with_gravity(
    x: &State,
    u: &ControlInput,
    theta: &NominalParams,
    gravity: &[f64; 3],
) -> Result<StateVector, DynamicsError> {
    check_input(u, theta)?;
    let f = nominal_rate(&x.to_array(), u.as_slice(), &theta.to_vec(), gravity);
    Ok(StateVector::from(f))
}

/// One RK4 step of the nonlinear model, with quaternion renormalization.
pub fn rk4_step(
    x: &State,
    u: &ControlInput,
    theta: &NominalParams,
    dt: f64,
) -> Result<State, DynamicsError> {
    rk4_step_with_gravity(x, u, theta, dt, &GRAVITY)
}

pub fn rk4_step_with_gravity(
    x: &State,
    u: &ControlInput,
    theta: &NominalParams,
    dt: f64,
    gravity: &[f64; 3],
) -> Result<State, DynamicsError> {
    check_input(u, theta)?;
    let th = theta.to_vec();
    let next = rk4_kernel(&x.to_array(), dt, |s| nominal_rate(s, u.as_slice(), &th, gravity));
    Ok(State::from_array(&next))
}

/// One forward-Euler step of the nonlinear model, with quaternion renormalization.
pub fn euler_step(
    x: &State,
    u: &ControlInput,
    theta: &NominalParams,
    dt: f64,
) -> Result<State, DynamicsError> {
    check_input(u, theta)?;
    let xa = x.to_array();
    let f = nominal_rate(&xa, u.as_slice(), &theta.to_vec(), &GRAVITY);
    let mut next: [f64; STATE_DIM] = std::array::from_fn(|i| xa[i] + dt * f[i]);
    normalize_quaternion_block(&mut next);
    Ok(State::from_array(&next))
}

/// Adds a discrete disturbance on the selected channels, renormalizing the
/// quaternion if it was perturbed.
pub fn add_disturbance(x: &State, w: &[f64; STATE_DIM], channels: DisturbanceChannels) -> State {
    let mask = channels.mask();
    let mut a = x.to_array();
    for i in 0..STATE_DIM {
        if mask[i] {
            a[i] += w[i];
        }
    }
    if mask[3..7].iter().any(|&b| b) {
        let q = Quaternion::new(a[3], a[4], a[5], a[6]).normalize();
        a[3..7].copy_from_slice(&q.to_array());
    }
    State::from_array(&a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_state(rng: &mut impl Rng) -> State {
        let q = loop {
            let q = Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if q.norm() > 0.1 {
                break q.normalize();
            }
        };
        let mut v3 = || Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        State { p: v3(), q, v: v3(), omega: v3() }
    }

    fn hover_input(spec: &ModelSpec) -> ControlInput {
        ControlInput::uniform(spec.rotors(), spec.hover_thrust())
    }

    #[test]
    fn hover_is_equilibrium_for_both_models() {
        for spec in [ModelSpec::crazyflie(), ModelSpec::fusion1()] {
            let f = derivative(&State::hover(), &hover_input(&spec), &spec.params).unwrap();
            assert!(f.abs().max() < 1e-12, "{}: {f}", spec.name);
        }
        let cf = ModelSpec::crazyflie();
        assert!((cf.hover_thrust() - 0.027 * 9.81 / 4.0).abs() < 1e-15);
        assert!((cf.hover_thrust() - 0.06622).abs() < 1e-5);
    }

    #[test]
    fn free_fall_with_zero_input() {
        let cf = ModelSpec::crazyflie();
        let f = derivative(&State::hover(), &ControlInput::uniform(4, 0.0), &cf.params).unwrap();
        let mut expect = StateVector::zeros();
        expect[9] = -9.81;
        assert_eq!(f, expect);
    }

    #[test]
    fn free_fall_magnitude_without_drag_at_any_attitude() {
        let mut theta = ModelSpec::crazyflie().params;
        theta.drag = [0.0; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut x = random_state(&mut rng);
            x.v = Vector3::zeros();
            x.omega = Vector3::zeros();
            let f = derivative(&x, &ControlInput::uniform(4, 0.0), &theta).unwrap();
            let acc = Vector3::new(f[7], f[8], f[9]).norm();
            assert!((acc - 9.81).abs() < 1e-12);
        }
    }

    #[test]
    fn roll_torque_balance() {
        let cf = ModelSpec::crazyflie();
        let (uh, eps) = (cf.hover_thrust(), 1e-3);
        let u = ControlInput(vec![uh + eps, uh - eps, uh - eps, uh + eps]);
        let f = derivative(&State::hover(), &u, &cf.params).unwrap();
        let expect = 4.0 * eps * 2.83e-2 / 1.44e-5;
        assert!((f[10] - expect).abs() < 1e-9 * expect, "{} vs {expect}", f[10]);
        assert!(f[11].abs() < 1e-9 && f[12].abs() < 1e-9);
    }

    #[test]
    fn rejects_invalid_parameters() {
        let mut theta = ModelSpec::crazyflie().params;
        theta.mass = 0.0;
        let e = derivative(&State::hover(), &ControlInput::uniform(4, 0.0), &theta).unwrap_err();
        assert!(matches!(e, DynamicsError::InvalidParameter { ref name, .. } if name == "mass"));
        let mut theta = ModelSpec::crazyflie().params;
        theta.inertia[1] = -1e-5;
        assert!(rk4_step(&State::hover(), &ControlInput::uniform(4, 0.0), &theta, 0.02).is_err());
        let theta = ModelSpec::crazyflie().params;
        assert!(derivative(&State::hover(), &ControlInput::uniform(3, 0.0), &theta).is_err());
    }

    #[test]
    fn rk4_hover_fixed_point_and_free_fall() {
        let cf = ModelSpec::crazyflie();
        let x = rk4_step(&State::hover(), &hover_input(&cf), &cf.params, 0.02).unwrap();
        assert!((x.to_vector() - State::hover().to_vector()).abs().max() < 1e-10);

        let mut theta = cf.params.clone();
        theta.drag = [0.0; 3];
        let mut x = State::hover();
        for _ in 0..25 {
            x = rk4_step(&x, &ControlInput::uniform(4, 0.0), &theta, 0.02).unwrap();
        }
        assert!((x.p.z + 1.22625).abs() < 1e-4, "{}", x.p.z);
    }

    #[test]
    fn euler_hover_and_first_free_fall_step() {
        let cf = ModelSpec::crazyflie();
        let x = euler_step(&State::hover(), &hover_input(&cf), &cf.params, 0.02).unwrap();
        assert!((x.to_vector() - State::hover().to_vector()).abs().max() < 1e-10);
        let x = euler_step(&State::hover(), &ControlInput::uniform(4, 0.0), &cf.params, 0.02).unwrap();
        assert!((x.v.z + 0.1962).abs() < 1e-15);
    }

    #[test]
    fn integrators_agree_at_small_steps_with_second_order_gap() {
        let cf = ModelSpec::crazyflie();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let uh = cf.hover_thrust();
        for _ in 0..50 {
            let x = random_state(&mut rng);
            let u = ControlInput((0..4).map(|_| uh * rng.gen_range(0.95..1.05)).collect());
            let gap = |dt: f64| {
                let a = rk4_step(&x, &u, &cf.params, dt).unwrap().to_vector();
                let b = euler_step(&x, &u, &cf.params, dt).unwrap().to_vector();
                (a - b).norm()
            };
            assert!(gap(1e-4) < 1e-6);
            let slope = (gap(2e-3) / gap(1e-3)).log2();
            assert!(slope >= 1.9, "slope {slope}");
        }
    }

    #[test]
    fn steps_keep_unit_quaternion() {
        let cf = ModelSpec::crazyflie();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let x = random_state(&mut rng);
            let u = ControlInput((0..4).map(|_| rng.gen_range(0.0..0.15)).collect());
            let a = rk4_step(&x, &u, &cf.params, 0.02).unwrap();
            let b = euler_step(&x, &u, &cf.params, 0.02).unwrap();
            assert!((a.q.norm() - 1.0).abs() < 1e-12);
            assert!((b.q.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn disturbance_channels() {
        let x = State::hover();
        assert_eq!(add_disturbance(&x, &[0.0; 13], DisturbanceChannels::PositionVelocityRate), x);
        let mut w = [0.0; 13];
        w[7] = 0.1;
        assert_eq!(add_disturbance(&x, &w, DisturbanceChannels::default()).v.x, 0.1);
        let mut w = [0.3; 13];
        w[3] = -0.7;
        let y = add_disturbance(&x, &w, DisturbanceChannels::Full);
        assert!((y.q.norm() - 1.0).abs() < 1e-12);
        let z = add_disturbance(&x, &w, DisturbanceChannels::PositionVelocityRate);
        assert_eq!(z.q, x.q);
    }

    #[test]
    fn param_vector_round_trip_and_labels() {
        let th = ModelSpec::fusion1().params;
        let v = th.to_vec();
        assert_eq!(v.len(), 19);
        assert_eq!(NominalParams::from_slice(4, &v).unwrap(), th);
        let labels = NominalParams::labels(4);
        assert_eq!(labels[0], "mu");
        assert_eq!(labels[7], "b1");
        assert_eq!(labels[18], "d4");
    }
}
