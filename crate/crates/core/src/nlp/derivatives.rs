//! Jacobians by forward-mode dual numbers, with central differences as a
//! cross-check.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Dual, Scalar};

/// Number of tangent directions propagated per forward pass.
pub const AD_CHUNK: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DerivativeError {
    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
}

/// A vector-valued function that can be evaluated on any [`Scalar`].
pub trait VectorFunction {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval<S: Scalar>(&self, x: &[S]) -> Vec<S>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    ForwardAd,
    /// Central differences with step `step · max(|xⱼ|, 1e-2)`.
    CentralDifference { step: f64 },
}

impl Default for DerivativeMode {
    fn default() -> Self {
        Self::ForwardAd
    }
}

/// Jacobian of `f` at `x`, `output_dim × input_dim`.
pub fn jacobian<F: VectorFunction>(
    f: &F,
    x: &[f64],
    mode: DerivativeMode,
) -> Result<DMatrix<f64>, DerivativeError> {
    if x.len() != f.input_dim() {
        return Err(DerivativeError::Dimension { what: "inputs", expected: f.input_dim(), got: x.len() });
    }
    match mode {
        DerivativeMode::ForwardAd => forward_jacobian(f, x),
        DerivativeMode::CentralDifference { step } => central_jacobian(f, x, step),
    }
}

fn check_output(f: &impl VectorFunction, got: usize) -> Result<(), DerivativeError> {
    if got == f.output_dim() {
        Ok(())
    } else {
        Err(DerivativeError::Dimension { what: "outputs", expected: f.output_dim(), got })
    }
}

fn forward_jacobian<F: VectorFunction>(f: &F, x: &[f64]) -> Result<DMatrix<f64>, DerivativeError> {
    let n = x.len();
    let mut jac = DMatrix::zeros(f.output_dim(), n);
    let mut start = 0;
    while start < n || (n == 0 && start == 0) {
        let xs: Vec<Dual<AD_CHUNK>> = x
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                if j >= start && j < start + AD_CHUNK {
                    Dual::variable(v, j - start)
                } else {
                    Dual::constant(v)
                }
            })
            .collect();
        let out = f.eval(&xs);
        check_output(f, out.len())?;
        for (i, o) in out.iter().enumerate() {
            for k in 0..AD_CHUNK.min(n.saturating_sub(start)) {
                jac[(i, start + k)] = o.d[k];
            }
        }
        if n == 0 {
            break;
        }
        start += AD_CHUNK;
    }
    Ok(jac)
}

fn central_jacobian<F: VectorFunction>(f: &F, x: &[f64], step: f64) -> Result<DMatrix<f64>, DerivativeError> {
    let n = x.len();
    let mut jac = DMatrix::zeros(f.output_dim(), n);
    let mut xp = x.to_vec();
    for j in 0..n {
        let h = step * x[j].abs().max(1e-2);
        xp[j] = x[j] + h;
        let fp = f.eval(&xp);
        xp[j] = x[j] - h;
        let fm = f.eval(&xp);
        xp[j] = x[j];
        check_output(f, fp.len())?;
        for i in 0..fp.len() {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Value and Jacobian in one call (value from the first AD pass).
pub fn value_and_jacobian<F: VectorFunction>(
    f: &F,
    x: &[f64],
    mode: DerivativeMode,
) -> Result<(Vec<f64>, DMatrix<f64>), DerivativeError> {
    let jac = jacobian(f, x, mode)?;
    let val = f.eval(x);
    check_output(f, val.len())?;
    Ok((val, jac))
}

/// Worst column-wise relative discrepancy between two Jacobians.
///
/// Each column is compared in the max norm relative to the larger of its
/// own magnitude and `floor · max|J|`, so all-zero columns are judged
/// against the overall scale of the matrix.
pub fn max_column_relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let global = a.amax().max(b.amax()).max(f64::MIN_POSITIVE);
    (0..a.ncols())
        .map(|j| {
            let diff = (a.column(j) - b.column(j)).amax();
            let scale = a.column(j).amax().max(b.column(j).amax()).max(floor * global);
            diff / scale
        })
        .fold(0.0, f64::max)
}
