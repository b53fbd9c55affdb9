//! Training and evaluation metrics: SSE, RSSE, and RSSE against a fresh ODE
//! solution at a given parameter vector.

use nalgebra::DVector;

use crate::error::{OdefitError, Result};
use crate::ode_solver::{solve, SolverConfig, TimeGrid};
use crate::vector_field::{Observation, VectorField};

/// Sum of squared errors over all entries of all rows.
pub fn sse(pred: &[DVector<f64>], target: &[DVector<f64>]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(OdefitError::DimensionMismatch {
            context: "sse rows",
            expected: target.len(),
            got: pred.len(),
        });
    }
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.len() != t.len() {
            return Err(OdefitError::DimensionMismatch {
                context: "sse columns",
                expected: t.len(),
                got: p.len(),
            });
        }
        for i in 0..p.len() {
            let d = p[i] - t[i];
            acc += d * d;
        }
    }
    Ok(acc)
}

/// Relative SSE, normalized by the pooled target energy:
/// `sum ||pred - target||^2 / sum ||target||^2`.
///
/// Scale-invariant: scaling both arguments by the same nonzero constant
/// leaves the value unchanged.
pub fn rsse(pred: &[DVector<f64>], target: &[DVector<f64>]) -> Result<f64> {
    let num = sse(pred, target)?;
    let energy: f64 = target.iter().map(|t| t.norm_squared()).sum();
    if energy == 0.0 {
        return Err(OdefitError::UndefinedMetric(
            "rsse: target has zero energy",
        ));
    }
    Ok(num / energy)
}

/// RSSE of the observed ODE solution at `theta` against `target`. This is the
/// loss used for cross-algorithm comparison: it always measures a genuine
/// ODE solution, even for methods whose iterates are not solutions.
pub fn rsse_on_ode(
    field: &dyn VectorField,
    theta: &DVector<f64>,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
    obs: &dyn Observation,
    target: &[DVector<f64>],
) -> Result<f64> {
    let traj = solve(field, theta, x0, grid, solver_cfg)?;
    let observed: Vec<DVector<f64>> = traj.states.iter().map(|x| obs.eval(x)).collect();
    rsse(&observed, target)
}
