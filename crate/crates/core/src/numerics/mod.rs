//! Dense linear algebra, a reverse-mode gradient tape and gradient checking.

mod linalg;
mod mat;
pub mod tape;

pub use linalg::{
    inv_sqrt_psd, pairwise_sq_dists, sym_eig_psd, InverseSqrt, SymEig, DEFAULT_EIG_FLOOR,
    JACOBI_MAX_SWEEPS, JACOBI_TOL,
};
pub use mat::Mat;
pub use tape::{GradNode, Gradients, Op, Tape, Var};

pub(crate) use mat::sq_dist;
pub(crate) use tape::log_softmax_rows;

use crate::error::{Error, Result};

/// Logistic sigmoid that never overflows.
#[inline]
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares the analytic gradient returned by `loss` against central finite
/// differences of its value.
///
/// `loss(θ)` returns `(value, gradient)`; only the value is used at the
/// perturbed points.
pub fn check_gradients<F>(mut loss: F, theta: &[f64], step: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {step}")));
    }
    let (_, analytic) = loss(theta)?;
    if analytic.len() != theta.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut probe = theta.to_vec();
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let (plus, _) = loss(&probe)?;
        probe[i] = theta[i] - step;
        let (minus, _) = loss(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite when perturbing coordinate {i}"
            )));
        }
        numeric.push((plus - minus) / (2.0 * step));
    }
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
