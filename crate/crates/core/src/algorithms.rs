//! The four training loops.
//!
//! * alg0_direct: gradient descent on theta with a sensitivity-augmented
//!   solve every epoch.
//! * alg1: alternating descent on `(x, theta)` against collocation residuals;
//!   one ODE solve total (the initialization).
//! * alg2: like alg1 but the trajectory block is reset to a fresh ODE solve
//!   each epoch, so the state step only sees the data-loss gradient.
//! * alg3: alg1 on the augmented Lagrangian with multiplier ascent.
//!
//! All loops use Gauss-Seidel ordering: the theta gradient of an epoch is
//! evaluated at that epoch's already-updated trajectory block.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collocation::{
    eval_window, loss_grad_nodes, loss_value_nodes, sum_squares, MultiplierState, ResidualConfig,
    SeedKind,
};
use crate::error::{OdefitError, Result};
use crate::metrics;
use crate::ode_solver::{solve, SolverConfig, TimeGrid};
use crate::optimizers::OptimizerSpec;
use crate::sensitivity::{loss_grad_theta, solve_with_sensitivity};
use crate::vector_field::{Observation, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Alg0Direct,
    Alg1,
    Alg2,
    Alg3,
}

impl std::fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AlgorithmKind::Alg0Direct => "alg0_direct",
            AlgorithmKind::Alg1 => "alg1",
            AlgorithmKind::Alg2 => "alg2",
            AlgorithmKind::Alg3 => "alg3",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for AlgorithmKind {
    type Err = OdefitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg0_direct" | "alg0" => Ok(AlgorithmKind::Alg0Direct),
            "alg1" => Ok(AlgorithmKind::Alg1),
            "alg2" => Ok(AlgorithmKind::Alg2),
            "alg3" => Ok(AlgorithmKind::Alg3),
            other => Err(OdefitError::InvalidConfig(format!(
                "unknown algorithm '{other}' (expected alg0_direct, alg1, alg2 or alg3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// Solve the full horizon from the given initial condition.
    GlobalX0,
    /// Solve only the mini-batch window, starting from the current estimate
    /// of the state at the window start.
    LocalState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinibatchConfig {
    /// Window length in intervals.
    pub window: usize,
    pub reset_mode: ResetMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: AlgorithmKind,
    pub epochs: usize,
    pub state_opt: OptimizerSpec,
    pub param_opt: OptimizerSpec,
    /// Early stop when the theta gradient norm drops below this.
    pub grad_norm_tol: Option<f64>,
    pub minibatch: Option<MinibatchConfig>,
    /// Penalty parameter for alg3.
    pub rho: f64,
    pub residual: ResidualConfig,
    /// Cadence (in epochs) for the RSSE-on-ODE metric where it needs an
    /// extra solve; 0 means first/last epoch only. Algorithms that already
    /// solve every epoch log it for free.
    pub rsse_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Stepsizes as in the reference setup: alg1 pairs SGD(0.01) on states
    /// with Adam(0.01) on parameters; alg2 uses SGD(1.0) on states.
    ///
    /// alg3 takes plain SGD steps on the parameters instead of Adam. The
    /// multiplier ascent injects a persistent bias into the parameter
    /// gradient while the primal blocks catch up; Adam's
    /// epsilon-normalization turns that small bias into constant-speed
    /// drift that walks the length scales negative and blows up the
    /// exponentials. Plain gradient steps shrink with the gradient, so the
    /// min-max iteration settles and the multipliers drive the residual
    /// well below the fixed-weight (alg1) plateau.
    pub fn for_algorithm(algorithm: AlgorithmKind) -> Self {
        let (state_lr, param_lr) = match algorithm {
            AlgorithmKind::Alg2 => (1.0, 0.01),
            _ => (0.01, 0.01),
        };
        let param_opt = match algorithm {
            AlgorithmKind::Alg3 => OptimizerSpec::sgd(param_lr),
            _ => OptimizerSpec::adam(param_lr),
        };
        Self {
            algorithm,
            epochs: 5000,
            state_opt: OptimizerSpec::sgd(state_lr),
            param_opt,
            grad_norm_tol: None,
            minibatch: None,
            rho: 1.0,
            residual: ResidualConfig::default(),
            rsse_every: 100,
            seed: 0,
        }
    }

    fn validate(&self, num_intervals: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(OdefitError::InvalidConfig("epochs must be >= 1".into()));
        }
        if let Some(mb) = &self.minibatch {
            if mb.window == 0 || mb.window > num_intervals {
                return Err(OdefitError::InvalidConfig(format!(
                    "mini-batch window {} out of range 1..={num_intervals}",
                    mb.window
                )));
            }
        }
        Ok(())
    }
}

/// One logged training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub sse: f64,
    pub rsse_ode: Option<f64>,
    pub grad_theta_norm: f64,
    pub grad_x_norm: Option<f64>,
    pub residual_norm: Option<f64>,
    pub epoch_seconds: f64,
}

/// Streaming consumer of epoch rows (e.g. a CSV writer).
pub trait RecordSink {
    fn on_epoch(&mut self, row: &EpochRow) -> Result<()>;
}

/// Discards rows.
pub struct NullSink;

impl RecordSink for NullSink {
    fn on_epoch(&mut self, _row: &EpochRow) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainRecord {
    pub rows: Vec<EpochRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    EarlyStopped { epoch: usize },
    /// Training loss went non-finite; partial record kept.
    Diverged { epoch: usize },
    /// The ODE (or sensitivity) solve failed; partial record kept.
    SolverFailed { epoch: usize },
}

impl RunStatus {
    pub fn is_failure(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. } | RunStatus::SolverFailed { .. })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub theta: DVector<f64>,
    /// Final trajectory block (alg1/alg2/alg3).
    pub states: Option<Vec<DVector<f64>>>,
    /// Final multipliers (alg3).
    pub lambda: Option<Vec<DVector<f64>>>,
    pub record: TrainRecord,
    pub status: RunStatus,
    /// ODE solves performed by the training loop itself (metric solves on
    /// the logging cadence are not counted).
    pub training_solves: usize,
}

fn observe(obs: &dyn Observation, states: &[DVector<f64>]) -> Vec<DVector<f64>> {
    states.iter().map(|x| obs.eval(x)).collect()
}

fn is_solver_error(err: &OdefitError) -> bool {
    matches!(
        err,
        OdefitError::Divergence { .. }
            | OdefitError::Instability { .. }
            | OdefitError::StepUnderflow { .. }
            | OdefitError::SensitivityInstability { .. }
    )
}

/// Uniform random window starts for the mini-batch scheme, one per epoch.
pub fn minibatch_schedule(
    rng: &mut impl Rng,
    epochs: usize,
    num_intervals: usize,
    window: usize,
) -> Result<Vec<usize>> {
    if window == 0 || window > num_intervals {
        return Err(OdefitError::InvalidConfig(format!(
            "window {window} out of range 1..={num_intervals}"
        )));
    }
    Ok((0..epochs)
        .map(|_| rng.gen_range(0..=num_intervals - window))
        .collect())
}

/// Flattens the per-node gradients into one vector covering all nodes,
/// placing `window_grads` at `nodes.start` and zero elsewhere; node 0 is
/// always zeroed (the initial condition is data, not a variable).
fn flat_state_grad(
    n: usize,
    num_nodes: usize,
    node_start: usize,
    window_grads: &[DVector<f64>],
) -> DVector<f64> {
    let mut flat = DVector::zeros(n * num_nodes);
    for (k, g) in window_grads.iter().enumerate() {
        let node = node_start + k;
        if node == 0 {
            continue;
        }
        flat.rows_mut(node * n, n).copy_from(g);
    }
    flat
}

fn flatten_states(x: &[DVector<f64>]) -> DVector<f64> {
    let n = x[0].len();
    let mut flat = DVector::zeros(n * x.len());
    for (k, row) in x.iter().enumerate() {
        flat.rows_mut(k * n, n).copy_from(row);
    }
    flat
}

fn unflatten_states(flat: &DVector<f64>, n: usize) -> Vec<DVector<f64>> {
    (0..flat.len() / n)
        .map(|k| flat.rows(k * n, n).into_owned())
        .collect()
}

struct EpochLogger<'a> {
    record: TrainRecord,
    sink: &'a mut dyn RecordSink,
}

impl<'a> EpochLogger<'a> {
    fn new(sink: &'a mut dyn RecordSink) -> Self {
        Self {
            record: TrainRecord::default(),
            sink,
        }
    }

    fn push(&mut self, row: EpochRow) -> Result<()> {
        self.sink.on_epoch(&row)?;
        self.record.rows.push(row);
        Ok(())
    }
}

fn want_rsse(cfg: &TrainConfig, epoch: usize) -> bool {
    epoch == 1 || epoch == cfg.epochs || (cfg.rsse_every > 0 && epoch % cfg.rsse_every == 0)
}

/// Algorithm 0: per epoch one sensitivity-augmented solve, then a parameter
/// step on the explicit loss gradient.
#[allow(clippy::too_many_arguments)]
pub fn run_alg0(
    field: &dyn VectorField,
    obs: &dyn Observation,
    targets: &[DVector<f64>],
    x0: &DVector<f64>,
    theta0: &DVector<f64>,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
    cfg: &TrainConfig,
    sink: &mut dyn RecordSink,
) -> Result<TrainOutcome> {
    cfg.validate(grid.num_intervals)?;
    let mut theta = theta0.clone();
    let mut param_opt = cfg.param_opt.build(theta.len());
    let mut logger = EpochLogger::new(sink);
    let mut status = RunStatus::Completed;
    let mut training_solves = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let solved = solve_with_sensitivity(field, &theta, x0, grid, solver_cfg);
        training_solves += 1;
        let (traj, sens) = match solved {
            Ok(pair) => pair,
            Err(e) if is_solver_error(&e) => {
                status = RunStatus::SolverFailed { epoch };
                break;
            }
            Err(e) => return Err(e),
        };
        let grad = loss_grad_theta(&traj, &sens, obs, targets)?;
        let grad_norm = grad.norm();
        param_opt.step(&mut theta, &grad)?;
        let epoch_seconds = started.elapsed().as_secs_f64();

        let observed = observe(obs, &traj.states);
        let sse = metrics::sse(&observed, targets)?;
        let rsse_ode = metrics::rsse(&observed, targets).ok();

        logger.push(EpochRow {
            epoch,
            sse,
            rsse_ode,
            grad_theta_norm: grad_norm,
            grad_x_norm: None,
            residual_norm: None,
            epoch_seconds,
        })?;

        if !sse.is_finite() {
            status = RunStatus::Diverged { epoch };
            break;
        }
        if let Some(tol) = cfg.grad_norm_tol {
            if grad_norm < tol {
                status = RunStatus::EarlyStopped { epoch };
                break;
            }
        }
    }

    Ok(TrainOutcome {
        theta,
        states: None,
        lambda: None,
        record: logger.record,
        status,
        training_solves,
    })
}

/// Shared loop for alg1 and alg3 (alg3 carries multipliers).
#[allow(clippy::too_many_arguments)]
fn run_residual_descent(
    field: &dyn VectorField,
    obs: &dyn Observation,
    targets: &[DVector<f64>],
    x0: &DVector<f64>,
    theta0: &DVector<f64>,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
    cfg: &TrainConfig,
    sink: &mut dyn RecordSink,
    mut multipliers: Option<MultiplierState>,
) -> Result<TrainOutcome> {
    cfg.validate(grid.num_intervals)?;
    let n = field.state_dim();
    let num_nodes = grid.num_nodes();
    let mut theta = theta0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // the single ODE solve: trajectory block initialization
    let mut x = match solve(field, &theta, x0, grid, solver_cfg) {
        Ok(traj) => traj.states,
        Err(e) if is_solver_error(&e) => {
            return Ok(TrainOutcome {
                theta,
                states: None,
                lambda: multipliers.map(|m| m.lambda),
                record: TrainRecord::default(),
                status: RunStatus::SolverFailed { epoch: 0 },
                training_solves: 1,
            })
        }
        Err(e) => return Err(e),
    };

    let mut state_opt = cfg.state_opt.build(n * num_nodes);
    let mut param_opt = cfg.param_opt.build(theta.len());
    let mut logger = EpochLogger::new(sink);
    let mut status = RunStatus::Completed;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let window = match &cfg.minibatch {
            Some(mb) => {
                let start = rng.gen_range(0..=grid.num_intervals - mb.window);
                start..start + mb.window
            }
            None => 0..grid.num_intervals,
        };
        let node_range = window.start..window.end + 1;

        // state step at (x_k, theta_k)
        let seed = match &multipliers {
            Some(m) => SeedKind::Multiplier(&m.lambda, m.rho),
            None => SeedKind::Weight(cfg.residual.residual_weight),
        };
        let eval = eval_window(
            &x,
            &theta,
            field,
            grid,
            &cfg.residual,
            window.clone(),
            seed,
            true,
            false,
        )?;
        let mut node_grads = eval.grad_x.expect("requested grad_x");
        for (g, l) in node_grads
            .iter_mut()
            .zip(loss_grad_nodes(&x, targets, obs, node_range.clone()))
        {
            *g += l;
        }
        let flat_grad = flat_state_grad(n, num_nodes, window.start, &node_grads);
        let grad_x_norm = flat_grad.norm();
        let mut flat_x = flatten_states(&x);
        state_opt.step(&mut flat_x, &flat_grad)?;
        x = unflatten_states(&flat_x, n);
        x[0] = x0.clone();

        // theta step at the updated trajectory block
        let seed = match &multipliers {
            Some(m) => SeedKind::Multiplier(&m.lambda, m.rho),
            None => SeedKind::Weight(cfg.residual.residual_weight),
        };
        let eval_theta = eval_window(
            &x,
            &theta,
            field,
            grid,
            &cfg.residual,
            window.clone(),
            seed,
            false,
            true,
        )?;
        let grad_theta = eval_theta.grad_theta.expect("requested grad_theta");
        let grad_theta_norm = grad_theta.norm();
        param_opt.step(&mut theta, &grad_theta)?;

        // multiplier ascent at (x_k, theta_k), both freshly updated
        let residual_norm = if let Some(mult) = multipliers.as_mut() {
            let fresh = eval_window(
                &x,
                &theta,
                field,
                grid,
                &cfg.residual,
                window.clone(),
                SeedKind::Weight(0.0),
                false,
                false,
            )?;
            for (i, r) in fresh.residuals.iter().enumerate() {
                mult.lambda[window.start + i].axpy(mult.rho, r, 1.0);
            }
            sum_squares(&fresh.residuals).sqrt()
        } else {
            sum_squares(&eval_theta.residuals).sqrt()
        };
        let epoch_seconds = started.elapsed().as_secs_f64();

        let sse = loss_value_nodes(&x, targets, obs, 0..num_nodes);
        let rsse_ode = if want_rsse(cfg, epoch) {
            metrics::rsse_on_ode(field, &theta, x0, grid, solver_cfg, obs, targets).ok()
        } else {
            None
        };

        logger.push(EpochRow {
            epoch,
            sse,
            rsse_ode,
            grad_theta_norm,
            grad_x_norm: Some(grad_x_norm),
            residual_norm: Some(residual_norm),
            epoch_seconds,
        })?;

        if !sse.is_finite() || !residual_norm.is_finite() {
            status = RunStatus::Diverged { epoch };
            break;
        }
        if let Some(tol) = cfg.grad_norm_tol {
            if grad_theta_norm < tol {
                status = RunStatus::EarlyStopped { epoch };
                break;
            }
        }
    }

    Ok(TrainOutcome {
        theta,
        states: Some(x),
        lambda: multipliers.map(|m| m.lambda),
        record: logger.record,
        status,
        training_solves: 1,
    })
}

/// Algorithm 1: alternating descent on the collocation loss; no ODE solves
/// inside the loop.
#[allow(clippy::too_many_arguments)]
pub fn run_alg1(
    field: &dyn VectorField,
    obs: &dyn Observation,
    targets: &[DVector<f64>],
    x0: &DVector<f64>,
    theta0: &DVector<f64>,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
    cfg: &TrainConfig,
    sink: &mut dyn RecordSink,
) -> Result<TrainOutcome> {
    run_residual_descent(
        field, obs, targets, x0, theta0, grid, solver_cfg, cfg, sink, None,
    )
}

/// Algorithm 3: alg1 on the augmented Lagrangian plus multiplier ascent
/// `lambda <- lambda + rho r(x_k, theta_k)` each epoch.
#[allow(clippy::too_many_arguments)]
pub fn run_alg3(
    field: &dyn VectorField,
    obs: &dyn Observation,
    targets: &[DVector<f64>],
    x0: &DVector<f64>,
    theta0: &DVector<f64>,
    lambda0: Option<Vec<DVector<f64>>>,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
    cfg: &TrainConfig,
    sink: &mut dyn RecordSink,
) -> Result<TrainOutcome> {
    let lambda = match lambda0 {
        Some(l) => {
            if l.len() != grid.num_intervals {
                return Err(OdefitError::DimensionMismatch {
                    context: "lambda0 blocks",
                    expected: grid.num_intervals,
                    got: l.len(),
                });
            }
            l
        }
        None => vec![DVector::zeros(field.state_dim()); grid.num_intervals],
    };
    run_residual_descent(
        field,
        obs,
        targets,
        x0,
        theta0,
        grid,
        solver_cfg,
        cfg,
        sink,
        Some(MultiplierState {
            lambda,
            rho: cfg.rho,
        }),
    )
}

/// Algorithm 2: state reset each epoch; the state step uses only the
/// data-loss gradient (the residual vanishes at the reset point), then the
/// theta step runs on the collocation gradient at the updated block.
#[allow(clippy::too_many_arguments)]
pub fn run_alg2(
    field: &dyn VectorField,
    obs: &dyn Observation,
    targets: &[DVector<f64>],
    x0: &DVector<f64>,
    theta0: &DVector<f64>,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
    cfg: &TrainConfig,
    sink: &mut dyn RecordSink,
) -> Result<TrainOutcome> {
    cfg.validate(grid.num_intervals)?;
    let n = field.state_dim();
    let num_nodes = grid.num_nodes();
    let mut theta = theta0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x: Vec<DVector<f64>> = vec![x0.clone(); num_nodes];
    let mut state_opt = cfg.state_opt.build(n * num_nodes);
    let mut param_opt = cfg.param_opt.build(theta.len());
    let mut logger = EpochLogger::new(sink);
    let mut status = RunStatus::Completed;
    let mut training_solves = 0usize;
    let mut have_full_state = false;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let window = match &cfg.minibatch {
            Some(mb) => {
                let start = rng.gen_range(0..=grid.num_intervals - mb.window);
                start..start + mb.window
            }
            None => 0..grid.num_intervals,
        };
        let node_range = window.start..window.end + 1;
        let local_reset = matches!(
            cfg.minibatch,
            Some(MinibatchConfig {
                reset_mode: ResetMode::LocalState,
                ..
            })
        ) && have_full_state;

        // state reset
        let mut reset_full: Option<Vec<DVector<f64>>> = None;
        let reset_result: Result<()> = if local_reset {
            let wgrid = TimeGrid::new(grid.time(window.start), grid.h, window.len())?;
            match solve(field, &theta, &x[window.start].clone(), &wgrid, solver_cfg) {
                Ok(traj) => {
                    for (k, row) in traj.states.into_iter().enumerate() {
                        x[window.start + k] = row;
                    }
                    Ok(())
                }
                Err(e) => Err(e),
            }
        } else {
            match solve(field, &theta, x0, grid, solver_cfg) {
                Ok(traj) => {
                    x = traj.states.clone();
                    reset_full = Some(traj.states);
                    have_full_state = true;
                    Ok(())
                }
                Err(e) => Err(e),
            }
        };
        training_solves += 1;
        if let Err(e) = reset_result {
            if is_solver_error(&e) {
                status = RunStatus::SolverFailed { epoch };
                break;
            }
            return Err(e);
        }
        let rsse_from_reset = reset_full
            .as_ref()
            .map(|states| metrics::rsse(&observe(obs, states), targets));

        // state step: gradient of the data loss only
        let node_grads = loss_grad_nodes(&x, targets, obs, node_range.clone());
        let flat_grad = flat_state_grad(n, num_nodes, window.start, &node_grads);
        let grad_x_norm = flat_grad.norm();
        let mut flat_x = flatten_states(&x);
        state_opt.step(&mut flat_x, &flat_grad)?;
        x = unflatten_states(&flat_x, n);
        x[0] = x0.clone();

        // theta step at the updated block
        let eval_theta = eval_window(
            &x,
            &theta,
            field,
            grid,
            &cfg.residual,
            window.clone(),
            SeedKind::Weight(cfg.residual.residual_weight),
            false,
            true,
        )?;
        let grad_theta = eval_theta.grad_theta.expect("requested grad_theta");
        let grad_theta_norm = grad_theta.norm();
        param_opt.step(&mut theta, &grad_theta)?;
        let residual_norm = sum_squares(&eval_theta.residuals).sqrt();
        let epoch_seconds = started.elapsed().as_secs_f64();

        let sse = loss_value_nodes(&x, targets, obs, 0..num_nodes);
        let rsse_ode = match rsse_from_reset {
            // the full reset already solved the ODE at this theta
            Some(r) => r.ok(),
            None if want_rsse(cfg, epoch) => {
                metrics::rsse_on_ode(field, &theta, x0, grid, solver_cfg, obs, targets).ok()
            }
            None => None,
        };

        logger.push(EpochRow {
            epoch,
            sse,
            rsse_ode,
            grad_theta_norm,
            grad_x_norm: Some(grad_x_norm),
            residual_norm: Some(residual_norm),
            epoch_seconds,
        })?;

        if !sse.is_finite() || !residual_norm.is_finite() {
            status = RunStatus::Diverged { epoch };
            break;
        }
        if let Some(tol) = cfg.grad_norm_tol {
            if grad_theta_norm < tol {
                status = RunStatus::EarlyStopped { epoch };
                break;
            }
        }
    }

    Ok(TrainOutcome {
        theta,
        states: Some(x),
        lambda: None,
        record: logger.record,
        status,
        training_solves,
    })
}

/// Dispatch on `cfg.algorithm`; alg3 starts from zero multipliers.
#[allow(clippy::too_many_arguments)]
pub fn train(
    field: &dyn VectorField,
    obs: &dyn Observation,
    targets: &[DVector<f64>],
    x0: &DVector<f64>,
    theta0: &DVector<f64>,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
    cfg: &TrainConfig,
    sink: &mut dyn RecordSink,
) -> Result<TrainOutcome> {
    match cfg.algorithm {
        AlgorithmKind::Alg0Direct => {
            run_alg0(field, obs, targets, x0, theta0, grid, solver_cfg, cfg, sink)
        }
        AlgorithmKind::Alg1 => {
            run_alg1(field, obs, targets, x0, theta0, grid, solver_cfg, cfg, sink)
        }
        AlgorithmKind::Alg2 => {
            run_alg2(field, obs, targets, x0, theta0, grid, solver_cfg, cfg, sink)
        }
        AlgorithmKind::Alg3 => run_alg3(
            field, obs, targets, x0, theta0, None, grid, solver_cfg, cfg, sink,
        ),
    }
}

/// Checks the equivalence between one composed (state step, theta step) pair
/// with the solver-distance residual `x - xhat(theta)` under state reset, and
/// a single direct gradient step with stepsize `alpha_x * alpha_theta`.
/// Returns the relative deviation between the two theta updates.
#[allow(clippy::too_many_arguments)]
pub fn check_alg0_recovery(
    field: &dyn VectorField,
    obs: &dyn Observation,
    targets: &[DVector<f64>],
    x0: &DVector<f64>,
    theta: &DVector<f64>,
    alpha_x: f64,
    alpha_theta: f64,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
) -> Result<f64> {
    let (traj, sens) = solve_with_sensitivity(field, theta, x0, grid, solver_cfg)?;

    // direct side: theta <- theta - alpha grad L, alpha = alpha_x alpha_theta
    let grad = loss_grad_theta(&traj, &sens, obs, targets)?;
    let direct = -alpha_x * alpha_theta * &grad;

    // composed side: reset, plain state step on the data loss, then a theta
    // step pulled back through d(x - xhat)/dtheta = -S on the literal
    // residual x_new - x_reset
    let p = theta.len();
    let mut composed = DVector::zeros(p);
    for (k, x_k) in traj.states.iter().enumerate() {
        let l_k = obs.apply_jac_transpose(x_k, &((obs.eval(x_k) - &targets[k]) * 2.0));
        let x_new = x_k - &l_k * alpha_x;
        let resid = &x_new - x_k;
        // -alpha_theta * (-S_k)^T resid
        composed += sens.values[k].transpose() * resid * alpha_theta;
    }

    let scale = direct.norm().max(composed.norm());
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok((&composed - &direct).norm() / scale)
}
