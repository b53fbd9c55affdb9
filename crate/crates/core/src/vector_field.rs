//! Contracts for parameterized ODE right-hand sides and observation maps.
//!
//! Everything downstream (solver, sensitivity, collocation) only talks to
//! these traits, so the machinery is model-agnostic.

use nalgebra::{DMatrix, DVector};

use crate::error::{OdefitError, Result};

/// Reusable linearization of a field at one point: repeated
/// vector-Jacobian products without recomputing shared per-point work
/// (pairwise distances, transcendentals).
///
/// Calling a product that was not requested from
/// [`VectorField::linearize`] is a programming error and panics.
pub trait Linearization {
    /// `(df/dx)^T v`.
    fn vjp_state(&self, seed: &DVector<f64>) -> DVector<f64>;
    /// `(df/dtheta)^T v`.
    fn vjp_params(&self, seed: &DVector<f64>) -> DVector<f64>;
}

/// Fallback [`Linearization`] holding the requested dense Jacobians.
pub struct DenseLinearization {
    pub jac_state: Option<DMatrix<f64>>,
    pub jac_params: Option<DMatrix<f64>>,
}

impl Linearization for DenseLinearization {
    fn vjp_state(&self, seed: &DVector<f64>) -> DVector<f64> {
        self.jac_state
            .as_ref()
            .expect("state products were not requested at linearize time")
            .tr_mul(seed)
    }
    fn vjp_params(&self, seed: &DVector<f64>) -> DVector<f64> {
        self.jac_params
            .as_ref()
            .expect("parameter products were not requested at linearize time")
            .tr_mul(seed)
    }
}

/// An autonomous parameterized vector field `f(x; theta)` with analytic
/// Jacobians with respect to both the state and the parameters.
///
/// Implementations must be pure: identical inputs give bit-identical
/// outputs, and evaluation is safe from many threads at once.
pub trait VectorField: Sync {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// `f(x; theta)`, length `state_dim`.
    fn eval(&self, state: &DVector<f64>, params: &DVector<f64>) -> Result<DVector<f64>>;

    /// `df/dx`, `state_dim x state_dim`.
    fn jac_state(&self, state: &DVector<f64>, params: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `df/dtheta`, `state_dim x param_dim`.
    fn jac_params(&self, state: &DVector<f64>, params: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// All three evaluations at one point. Models with shared intermediate
    /// work (pairwise distances, exponentials) should override this.
    fn eval_with_jacobians(
        &self,
        state: &DVector<f64>,
        params: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        Ok((
            self.eval(state, params)?,
            self.jac_state(state, params)?,
            self.jac_params(state, params)?,
        ))
    }

    /// `f(x; theta)` plus a handle for cheap repeated `J^T v` products at
    /// the same point; the flags declare which products the caller will
    /// take. Models whose Jacobians share expensive per-point
    /// intermediates should override this with a fused single pass.
    fn linearize(
        &self,
        state: &DVector<f64>,
        params: &DVector<f64>,
        want_state: bool,
        want_params: bool,
    ) -> Result<(DVector<f64>, Box<dyn Linearization>)> {
        Ok((
            self.eval(state, params)?,
            Box::new(DenseLinearization {
                jac_state: want_state
                    .then(|| self.jac_state(state, params))
                    .transpose()?,
                jac_params: want_params
                    .then(|| self.jac_params(state, params))
                    .transpose()?,
            }),
        ))
    }
}

/// Observation map `y = h(x)` with Jacobian `H = dh/dx`.
pub trait Observation: Sync {
    fn out_dim(&self, state_dim: usize) -> usize;

    fn eval(&self, state: &DVector<f64>) -> DVector<f64>;

    fn jac(&self, state: &DVector<f64>) -> DMatrix<f64>;

    /// `H(x)^T v`; the identity map overrides this to skip the matrix.
    fn apply_jac_transpose(&self, state: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.jac(state).transpose() * v
    }
}

/// Full-state observation, `h(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityObs;

impl Observation for IdentityObs {
    fn out_dim(&self, state_dim: usize) -> usize {
        state_dim
    }

    fn eval(&self, state: &DVector<f64>) -> DVector<f64> {
        state.clone()
    }

    fn jac(&self, state: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(state.len(), state.len())
    }

    fn apply_jac_transpose(&self, _state: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
}

/// Compares both analytic Jacobians against central finite differences of
/// `eval` and returns the worst entrywise relative error. The denominator is
/// floored at 1 so near-zero entries are compared absolutely.
pub fn fd_check_jacobians(
    field: &dyn VectorField,
    point: &DVector<f64>,
    params: &DVector<f64>,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(OdefitError::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let n = field.state_dim();
    let p = field.param_dim();

    let jx = field.jac_state(point, params)?;
    let jp = field.jac_params(point, params)?;

    let mut worst: f64 = 0.0;

    let mut update = |analytic: f64, fd: f64| {
        let denom = analytic.abs().max(fd.abs()).max(1.0);
        worst = worst.max((analytic - fd).abs() / denom);
    };

    let eval_checked = |x: &DVector<f64>, th: &DVector<f64>| -> Result<DVector<f64>> {
        let out = field.eval(x, th)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(OdefitError::NonFinite("fd_check_jacobians field evaluation"));
        }
        Ok(out)
    };

    for col in 0..n {
        let mut plus = point.clone();
        let mut minus = point.clone();
        plus[col] += step;
        minus[col] -= step;
        let fp = eval_checked(&plus, params)?;
        let fm = eval_checked(&minus, params)?;
        for row in 0..n {
            update(jx[(row, col)], (fp[row] - fm[row]) / (2.0 * step));
        }
    }

    for col in 0..p {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus[col] += step;
        minus[col] -= step;
        let fp = eval_checked(point, &plus)?;
        let fm = eval_checked(point, &minus)?;
        for row in 0..n {
            update(jp[(row, col)], (fp[row] - fm[row]) / (2.0 * step));
        }
    }

    Ok(worst)
}
