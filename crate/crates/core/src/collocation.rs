//! Hermite-Simpson collocation residuals, the merged loss `F(x, theta)`, the
//! augmented Lagrangian, and analytic gradients with respect to both the free
//! trajectory block and the parameters.
//!
//! Per interval `i` with spacing `h` and midpoint coefficient `beta`:
//!
//! ```text
//! x_c = (x_i + x_{i+1}) / 2 + beta h (f(x_i) - f(x_{i+1}))
//! r_i = x_i - x_{i+1} + h/6 (f(x_i) + f(x_{i+1}) + 4 f(x_c))
//! ```
//!
//! Each residual block touches only `(x_i, x_{i+1}, theta)`, so evaluation is
//! interval-local and gradients are assembled from three local Jacobian
//! blocks. The chain rule passes through the midpoint:
//! `d x_c / d x_i = I/2 + beta h J(x_i)`, `d x_c / d x_{i+1} = I/2 - beta h J(x_{i+1})`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{OdefitError, Result};
use crate::ode_solver::TimeGrid;
use crate::vector_field::{Linearization, Observation, VectorField};

/// Midpoint coefficient 1/6 matches the trapezoid-quadrature variant used as
/// the default residual; 1/8 is the classical Hermite interpolant midpoint.
pub const MIDPOINT_COEFF_DEFAULT: f64 = 1.0 / 6.0;
pub const MIDPOINT_COEFF_CLASSIC: f64 = 1.0 / 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualConfig {
    /// `beta` in the midpoint formula above.
    pub midpoint_coeff: f64,
    /// Weight of the squared-residual term in `F` (the default 1 gives
    /// `F = L + ||r||^2 / 2`).
    pub residual_weight: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            midpoint_coeff: MIDPOINT_COEFF_DEFAULT,
            residual_weight: 1.0,
        }
    }
}

impl ResidualConfig {
    pub fn classic() -> Self {
        Self {
            midpoint_coeff: MIDPOINT_COEFF_CLASSIC,
            ..Default::default()
        }
    }
}

/// Lagrange multipliers (one block per residual interval) and penalty `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierState {
    pub lambda: Vec<DVector<f64>>,
    pub rho: f64,
}

impl MultiplierState {
    pub fn zeros(state_dim: usize, num_intervals: usize, rho: f64) -> Self {
        Self {
            lambda: vec![DVector::zeros(state_dim); num_intervals],
            rho,
        }
    }
}

/// How residual blocks are weighted when pulled back through the Jacobians:
/// `Weight` gives `lw * r_i` (gradients of `F`), `Multiplier` gives
/// `lambda_i + rho * r_i` (gradients of the augmented Lagrangian).
pub(crate) enum SeedKind<'a> {
    Weight(f64),
    Multiplier(&'a [DVector<f64>], f64),
}

pub(crate) struct CollocationEval {
    /// Residual blocks for the window's intervals.
    pub residuals: Vec<DVector<f64>>,
    /// Per-node gradient contribution of the residual term, window nodes
    /// only (`window.len() + 1` entries). Loss term not included.
    pub grad_x: Option<Vec<DVector<f64>>>,
    pub grad_theta: Option<DVector<f64>>,
}

fn check_states(x: &[DVector<f64>], field: &dyn VectorField, grid: &TimeGrid) -> Result<()> {
    if x.len() != grid.num_nodes() {
        return Err(OdefitError::DimensionMismatch {
            context: "collocation states vs grid",
            expected: grid.num_nodes(),
            got: x.len(),
        });
    }
    let n = field.state_dim();
    for row in x {
        if row.len() != n {
            return Err(OdefitError::DimensionMismatch {
                context: "collocation state width",
                expected: n,
                got: row.len(),
            });
        }
    }
    Ok(())
}

/// Shared evaluation engine over an interval window. Node quantities
/// (`f`, and Jacobians when requested) are computed once per node and reused
/// by the two adjacent intervals; reduction order is interval-major and
/// fixed, so results are deterministic.
pub(crate) fn eval_window(
    x: &[DVector<f64>],
    params: &DVector<f64>,
    field: &dyn VectorField,
    grid: &TimeGrid,
    cfg: &ResidualConfig,
    window: Range<usize>,
    seed: SeedKind<'_>,
    want_grad_x: bool,
    want_grad_theta: bool,
) -> Result<CollocationEval> {
    check_states(x, field, grid)?;
    if window.end > grid.num_intervals || window.start >= window.end {
        return Err(OdefitError::InvalidConfig(format!(
            "interval window {}..{} out of range (num_intervals = {})",
            window.start, window.end, grid.num_intervals
        )));
    }
    let n = field.state_dim();
    let p = field.param_dim();
    let h = grid.h;
    let beta = cfg.midpoint_coeff;
    let nodes = window.end - window.start + 1;
    let need_jc = want_grad_x || want_grad_theta;

    // node-level caches over window nodes; linearizations amortize the
    // per-point Jacobian work across the two adjacent intervals
    let mut f_nodes = Vec::with_capacity(nodes);
    let mut lin_nodes: Vec<Box<dyn Linearization>> = Vec::new();
    for k in window.start..=window.end {
        if need_jc {
            let (f, lin) = field.linearize(&x[k], params, want_grad_x, want_grad_theta)?;
            f_nodes.push(f);
            lin_nodes.push(lin);
        } else {
            f_nodes.push(field.eval(&x[k], params)?);
        }
    }

    let mut residuals = Vec::with_capacity(window.len());
    let mut grad_x = want_grad_x.then(|| vec![DVector::zeros(n); nodes]);
    let mut grad_theta = want_grad_theta.then(|| DVector::zeros(p));

    // pass 1 over intervals: residuals, seeded residual blocks `s_i`, and
    // the midpoint pullbacks `w_i = J(x_c)^T s_i` feeding both chains
    let mut seeds_s: Vec<DVector<f64>> = Vec::new();
    let mut seeds_w: Vec<DVector<f64>> = Vec::new();
    for i in window.clone() {
        let li = i - window.start;
        let (xa, xb) = (&x[i], &x[i + 1]);
        let (fa, fb) = (&f_nodes[li], &f_nodes[li + 1]);

        let mut x_c = (xa + xb) * 0.5;
        x_c.axpy(beta * h, fa, 1.0);
        x_c.axpy(-beta * h, fb, 1.0);
        let (f_c, lin_c) = if need_jc {
            // the midpoint state product feeds both gradient chains via `w`
            let (f, lin) = field.linearize(&x_c, params, true, want_grad_theta)?;
            (f, Some(lin))
        } else {
            (field.eval(&x_c, params)?, None)
        };

        let mut r = xa - xb;
        r.axpy(h / 6.0, fa, 1.0);
        r.axpy(h / 6.0, fb, 1.0);
        r.axpy(4.0 * h / 6.0, &f_c, 1.0);

        let s = match &seed {
            SeedKind::Weight(lw) => &r * *lw,
            SeedKind::Multiplier(lambda, rho) => &lambda[i] + &r * *rho,
        };

        if let Some(lin_c) = lin_c {
            let w = lin_c.vjp_state(&s);
            if let Some(gth) = grad_theta.as_mut() {
                // midpoint term of (dr_i/dtheta)^T s
                *gth += lin_c.vjp_params(&(&s * 4.0)) * (h / 6.0);
            }
            seeds_s.push(s);
            seeds_w.push(w);
        }

        residuals.push(r);
    }

    // pass 2 over nodes: each node's two interval contributions collapse
    // into a single J^T product with a combined seed.
    //
    //   (dr_i/dx_i)^T s     =  s + h/3 w + J_i^T    (h/6 s + 2 beta h^2/3 w)
    //   (dr_i/dx_{i+1})^T s = -s + h/3 w + J_{i+1}^T(h/6 s - 2 beta h^2/3 w)
    //   (dr_i/dtheta)^T s   = h/6 [f_theta(x_i)^T (s + 4 beta h w)
    //                             + f_theta(x_{i+1})^T (s - 4 beta h w)
    //                             + 4 f_theta(x_c)^T s]
    if need_jc {
        let num_intervals = window.len();
        for node in 0..nodes {
            let mut state_seed = grad_x.is_some().then(|| DVector::zeros(n));
            let mut param_seed = grad_theta.is_some().then(|| DVector::zeros(n));
            // node as left endpoint of interval `node`
            if node < num_intervals {
                let (s, w) = (&seeds_s[node], &seeds_w[node]);
                if let Some(gx) = grad_x.as_mut() {
                    gx[node] += s;
                    gx[node].axpy(4.0 * h / 6.0 * 0.5, w, 1.0);
                    let seed = state_seed.as_mut().unwrap();
                    seed.axpy(h / 6.0, s, 1.0);
                    seed.axpy(4.0 * h / 6.0 * beta * h, w, 1.0);
                }
                if let Some(seed) = param_seed.as_mut() {
                    seed.axpy(1.0, s, 1.0);
                    seed.axpy(4.0 * beta * h, w, 1.0);
                }
            }
            // node as right endpoint of interval `node - 1`
            if node > 0 {
                let (s, w) = (&seeds_s[node - 1], &seeds_w[node - 1]);
                if let Some(gx) = grad_x.as_mut() {
                    gx[node] -= s;
                    gx[node].axpy(4.0 * h / 6.0 * 0.5, w, 1.0);
                    let seed = state_seed.as_mut().unwrap();
                    seed.axpy(h / 6.0, s, 1.0);
                    seed.axpy(-4.0 * h / 6.0 * beta * h, w, 1.0);
                }
                if let Some(seed) = param_seed.as_mut() {
                    seed.axpy(1.0, s, 1.0);
                    seed.axpy(-4.0 * beta * h, w, 1.0);
                }
            }
            if let Some(gx) = grad_x.as_mut() {
                gx[node] += lin_nodes[node].vjp_state(&state_seed.unwrap());
            }
            if let Some(gth) = grad_theta.as_mut() {
                *gth += lin_nodes[node].vjp_params(&param_seed.unwrap()) * (h / 6.0);
            }
        }
    }

    Ok(CollocationEval {
        residuals,
        grad_x,
        grad_theta,
    })
}

/// Hermite-Simpson residual blocks, one per grid interval.
pub fn residual(
    x: &[DVector<f64>],
    params: &DVector<f64>,
    field: &dyn VectorField,
    grid: &TimeGrid,
    cfg: &ResidualConfig,
) -> Result<Vec<DVector<f64>>> {
    let eval = eval_window(
        x,
        params,
        field,
        grid,
        cfg,
        0..grid.num_intervals,
        SeedKind::Weight(0.0),
        false,
        false,
    )?;
    Ok(eval.residuals)
}

pub(crate) fn sum_squares(blocks: &[DVector<f64>]) -> f64 {
    blocks.iter().map(|b| b.norm_squared()).sum()
}

/// Per-node gradient of the SSE observation loss over the given node range.
pub(crate) fn loss_grad_nodes(
    x: &[DVector<f64>],
    targets: &[DVector<f64>],
    obs: &dyn Observation,
    nodes: Range<usize>,
) -> Vec<DVector<f64>> {
    nodes
        .map(|k| {
            let resid = obs.eval(&x[k]) - &targets[k];
            obs.apply_jac_transpose(&x[k], &(resid * 2.0))
        })
        .collect()
}

pub(crate) fn loss_value_nodes(
    x: &[DVector<f64>],
    targets: &[DVector<f64>],
    obs: &dyn Observation,
    nodes: Range<usize>,
) -> f64 {
    nodes
        .map(|k| (obs.eval(&x[k]) - &targets[k]).norm_squared())
        .sum()
}

/// `F(x, theta) = sum_k ||h(x_k) - y_k||^2 + lw/2 ||r(x, theta)||^2`.
pub fn loss_f(
    x: &[DVector<f64>],
    params: &DVector<f64>,
    targets: &[DVector<f64>],
    obs: &dyn Observation,
    field: &dyn VectorField,
    grid: &TimeGrid,
    cfg: &ResidualConfig,
) -> Result<f64> {
    let r = residual(x, params, field, grid, cfg)?;
    let data = loss_value_nodes(x, targets, obs, 0..grid.num_nodes());
    Ok(data + 0.5 * cfg.residual_weight * sum_squares(&r))
}

/// Exact analytic gradient of `F` with respect to every trajectory node.
pub fn grad_x_f(
    x: &[DVector<f64>],
    params: &DVector<f64>,
    targets: &[DVector<f64>],
    obs: &dyn Observation,
    field: &dyn VectorField,
    grid: &TimeGrid,
    cfg: &ResidualConfig,
) -> Result<Vec<DVector<f64>>> {
    let eval = eval_window(
        x,
        params,
        field,
        grid,
        cfg,
        0..grid.num_intervals,
        SeedKind::Weight(cfg.residual_weight),
        true,
        false,
    )?;
    let mut grad = eval.grad_x.expect("requested grad_x");
    for (g, l) in grad
        .iter_mut()
        .zip(loss_grad_nodes(x, targets, obs, 0..grid.num_nodes()))
    {
        *g += l;
    }
    Ok(grad)
}

/// Gradient of `F` with respect to theta (the observation loss does not
/// depend on theta, so this is purely the residual term).
pub fn grad_theta_f(
    x: &[DVector<f64>],
    params: &DVector<f64>,
    field: &dyn VectorField,
    grid: &TimeGrid,
    cfg: &ResidualConfig,
) -> Result<DVector<f64>> {
    let eval = eval_window(
        x,
        params,
        field,
        grid,
        cfg,
        0..grid.num_intervals,
        SeedKind::Weight(cfg.residual_weight),
        false,
        true,
    )?;
    Ok(eval.grad_theta.expect("requested grad_theta"))
}

/// Augmented Lagrangian `L(x) + lambda^T r + rho/2 ||r||^2` with both
/// gradients. With `lambda = 0` and `rho = residual_weight` this reduces to
/// `loss_f` / `grad_x_f` / `grad_theta_f` exactly.
pub fn auglag_value_and_grads(
    x: &[DVector<f64>],
    params: &DVector<f64>,
    mult: &MultiplierState,
    targets: &[DVector<f64>],
    obs: &dyn Observation,
    field: &dyn VectorField,
    grid: &TimeGrid,
    cfg: &ResidualConfig,
) -> Result<(f64, Vec<DVector<f64>>, DVector<f64>)> {
    if mult.lambda.len() != grid.num_intervals {
        return Err(OdefitError::DimensionMismatch {
            context: "multiplier blocks vs intervals",
            expected: grid.num_intervals,
            got: mult.lambda.len(),
        });
    }
    let eval = eval_window(
        x,
        params,
        field,
        grid,
        cfg,
        0..grid.num_intervals,
        SeedKind::Multiplier(&mult.lambda, mult.rho),
        true,
        true,
    )?;
    let mut value = loss_value_nodes(x, targets, obs, 0..grid.num_nodes());
    for (lam, r) in mult.lambda.iter().zip(&eval.residuals) {
        value += lam.dot(r) + 0.5 * mult.rho * r.norm_squared();
    }
    let mut grad_x = eval.grad_x.expect("requested grad_x");
    for (g, l) in grad_x
        .iter_mut()
        .zip(loss_grad_nodes(x, targets, obs, 0..grid.num_nodes()))
    {
        *g += l;
    }
    Ok((value, grad_x, eval.grad_theta.expect("requested grad_theta")))
}
