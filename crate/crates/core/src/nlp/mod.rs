//! General nonlinear programming: derivative providers and an SQP solver
//! built on the in-repo QP.

pub mod derivatives;
mod sqp;

pub use derivatives::{jacobian, DerivativeError, DerivativeMode, VectorFunction};
pub use sqp::{solve_nlp, HessianMode, MeritStep, NlpError, NlpProblem, NlpSolution, NlpStatus, SqpSettings};
