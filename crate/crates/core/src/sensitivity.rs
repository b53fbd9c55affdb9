//! Forward (direct) sensitivity analysis: integrate the state jointly with
//! `S = dx/dtheta` and assemble loss gradients from the result.

use nalgebra::{DMatrix, DVector};

use crate::error::{OdefitError, Result};
use crate::ode_solver::{solve_rhs, SolverConfig, TimeGrid, Trajectory};
use crate::vector_field::{Observation, VectorField};

/// `S_i = dx(t_i)/dtheta`, one `n x p` matrix per grid node. `S_0 = 0`
/// because the initial condition is data, not a parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTensor {
    pub values: Vec<DMatrix<f64>>,
}

/// Integrates the augmented system
/// `xdot = f(x; theta)`, `Sdot = (df/dx) S + df/dtheta`
/// (dimension `n (1 + p)`) with the configured solver; error control sees the
/// full augmented state.
pub fn solve_with_sensitivity(
    field: &dyn VectorField,
    params: &DVector<f64>,
    x0: &DVector<f64>,
    grid: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<(Trajectory, SensitivityTensor)> {
    let n = field.state_dim();
    let p = field.param_dim();

    // layout: [x; S column 0; ...; S column p-1]
    let rhs = |aug: &DVector<f64>| -> Result<DVector<f64>> {
        let x = aug.rows(0, n).into_owned();
        let (f, jx, jp) = field.eval_with_jacobians(&x, params)?;
        let mut out = DVector::zeros(n * (1 + p));
        out.rows_mut(0, n).copy_from(&f);
        for col in 0..p {
            let s_col = aug.rows(n * (1 + col), n);
            let mut ds = &jx * s_col;
            ds += jp.column(col);
            out.rows_mut(n * (1 + col), n).copy_from(&ds);
        }
        Ok(out)
    };

    let mut aug0 = DVector::zeros(n * (1 + p));
    aug0.rows_mut(0, n).copy_from(x0);

    let aug_traj = solve_rhs(&rhs, &aug0, grid, cfg).map_err(|e| match e {
        OdefitError::Instability { t } | OdefitError::StepUnderflow { t, .. } => {
            OdefitError::SensitivityInstability { t }
        }
        other => other,
    })?;

    let mut states = Vec::with_capacity(aug_traj.states.len());
    let mut sens = Vec::with_capacity(aug_traj.states.len());
    for row in &aug_traj.states {
        states.push(row.rows(0, n).into_owned());
        let mut s = DMatrix::zeros(n, p);
        for col in 0..p {
            s.column_mut(col).copy_from(&row.rows(n * (1 + col), n));
        }
        sens.push(s);
    }

    Ok((
        Trajectory {
            grid: *grid,
            states,
        },
        SensitivityTensor { values: sens },
    ))
}

/// Gradient of the SSE training loss with respect to theta:
/// `sum_i S_i^T H(x_i)^T 2 (h(x_i) - y_i)`.
pub fn loss_grad_theta(
    traj: &Trajectory,
    sens: &SensitivityTensor,
    obs: &dyn Observation,
    targets: &[DVector<f64>],
) -> Result<DVector<f64>> {
    if traj.states.len() != targets.len() || traj.states.len() != sens.values.len() {
        return Err(OdefitError::DimensionMismatch {
            context: "loss_grad_theta",
            expected: traj.states.len(),
            got: targets.len().min(sens.values.len()),
        });
    }
    let p = sens.values[0].ncols();
    let mut grad = DVector::zeros(p);
    for (i, x) in traj.states.iter().enumerate() {
        let resid = obs.eval(x) - &targets[i];
        let pulled = obs.apply_jac_transpose(x, &(resid * 2.0));
        grad += sens.values[i].transpose() * pulled;
    }
    Ok(grad)
}
