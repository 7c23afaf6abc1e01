#![allow(dead_code)]

use lqmhpe::attitude::Quaternion;
use lqmhpe::dynamics::{rk4_step, ControlInput, ModelSpec, NominalParams, State, STATE_DIM};
use lqmhpe::mhpe::HorizonWindow;
use lqmhpe::relaxation::{affine_euler_step, ParamBox, RelaxedParams};
use nalgebra::Vector3;
use rand::Rng;

pub fn random_theta(rng: &mut impl Rng, model: &ModelSpec) -> NominalParams {
    let bx = ParamBox::from_factors(&model.params, 0.5, 1.5).unwrap();
    let v: Vec<f64> = (0..bx.dim()).map(|i| rng.gen_range(bx.lower[i]..=bx.upper[i])).collect();
    NominalParams::from_slice(model.rotors(), &v).unwrap()
}

pub fn excited_state(rng: &mut impl Rng) -> State {
    let mut v3 = |s: f64| Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
    let p = v3(2.0);
    let v = v3(1.0);
    let omega = v3(2.0);
    let q = Quaternion::new(1.0, rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))
        .normalize();
    State { p, q, v, omega }
}

pub fn random_input(rng: &mut impl Rng, model: &ModelSpec) -> ControlInput {
    let uh = model.hover_thrust();
    ControlInput((0..model.rotors()).map(|_| uh * rng.gen_range(0.6..1.4)).collect())
}

/// Window of `m` zero-noise transitions of the affine Euler model at `vt`.
pub fn euler_window(rng: &mut impl Rng, model: &ModelSpec, vt: &RelaxedParams, m: usize, dt: f64) -> HorizonWindow {
    let mut x = excited_state(rng);
    let mut win = HorizonWindow::new(m, dt, x.clone());
    for _ in 0..m {
        let u = random_input(rng, model);
        x = affine_euler_step(&x, &u, vt, &[0.0; STATE_DIM], dt);
        win.push_step(x.clone(), u, [0.0; STATE_DIM]);
    }
    win
}

/// Window of `m` zero-noise RK4 transitions of the physical model at `theta`.
pub fn rk4_window(rng: &mut impl Rng, model: &ModelSpec, theta: &NominalParams, m: usize, dt: f64) -> HorizonWindow {
    let mut x = excited_state(rng);
    let mut win = HorizonWindow::new(m, dt, x.clone());
    for _ in 0..m {
        let u = random_input(rng, model);
        x = rk4_step(&x, &u, theta, dt).unwrap();
        win.push_step(x.clone(), u, [0.0; STATE_DIM]);
    }
    win
}

/// Largest relative deviation `|aᵢ − bᵢ| / max(|bᵢ|, 1e-12)`.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1e-12)).fold(0.0, f64::max)
}
