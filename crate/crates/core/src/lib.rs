//! Relaxed affine-in-parameter moving-horizon parameter estimation (LQ-MHPE)
//! for adaptive nonlinear MPC of multirotors, with the nonlinear estimator
//! baseline, the in-repo QP/SQP solvers, and a Monte Carlo harness.

pub mod attitude;
pub mod dynamics;
pub mod mhpe;
pub mod monte_carlo;
pub mod nlp;
pub mod nmpc;
pub mod qp;
pub mod relaxation;
pub mod scalar;
pub mod validation;
