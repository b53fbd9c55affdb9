//! C ABI over the odefit core: opaque model handles, flat `double` buffers,
//! integer status codes, and a thread-local last-error message.
//!
//! Conventions:
//! * Every fallible call returns [`OdefitStatus`]; on anything other than
//!   `Ok` the detailed message is available via [`odefit_last_error`].
//! * Buffers are caller-allocated; lengths are always passed explicitly and
//!   validated against the model dimensions.
//! * Handles from `odefit_cucker_smale_new` must be released with
//!   [`odefit_model_free`] exactly once.

use std::cell::RefCell;
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use nalgebra::DVector;

use odefit::algorithms::{train, AlgorithmKind, NullSink, TrainConfig};
use odefit::cucker_smale::CuckerSmale;
use odefit::ode_solver::{solve, SolverConfig, TimeGrid};
use odefit::vector_field::{IdentityObs, VectorField};

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(msg: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg.into());
}

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdefitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SolverFailure = 3,
    TrainingFailure = 4,
    InternalPanic = 5,
}

/// Opaque model handle (currently always a Cucker-Smale instance).
pub struct OdefitModel {
    field: CuckerSmale,
}

/// Copies the last error message for the calling thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length in
/// bytes, excluding the terminator; call with `buf = NULL` to query the size.
#[no_mangle]
pub extern "C" fn odefit_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Creates a planar Cucker-Smale model with `num_particles` particles
/// (state dimension `4 * num_particles`, 5 parameters). Returns NULL for
/// zero particles.
#[no_mangle]
pub extern "C" fn odefit_cucker_smale_new(num_particles: usize) -> *mut OdefitModel {
    if num_particles == 0 {
        set_last_error("num_particles must be positive");
        return std::ptr::null_mut();
    }
    Box::into_raw(Box::new(OdefitModel {
        field: CuckerSmale::new(num_particles),
    }))
}

/// Releases a model handle. NULL is a no-op.
#[no_mangle]
pub extern "C" fn odefit_model_free(model: *mut OdefitModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

#[no_mangle]
pub extern "C" fn odefit_model_state_dim(model: *const OdefitModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.field.state_dim()
}

#[no_mangle]
pub extern "C" fn odefit_model_param_dim(model: *const OdefitModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.field.param_dim()
}

fn guard<F: FnOnce() -> OdefitStatus>(f: F) -> OdefitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            OdefitStatus::InternalPanic
        }
    }
}

/// # Safety
/// Caller guarantees `ptr` points to `len` readable doubles.
unsafe fn read_vec(ptr: *const f64, len: usize) -> Option<DVector<f64>> {
    if ptr.is_null() {
        return None;
    }
    Some(DVector::from_column_slice(slice::from_raw_parts(ptr, len)))
}

fn solver_config(rtol: f64, atol: f64) -> SolverConfig {
    SolverConfig {
        rtol,
        atol,
        ..Default::default()
    }
}

/// Integrates the model from `x0` over `num_intervals` uniform steps of
/// size `h` starting at `t0` and writes the `(num_intervals + 1) *
/// state_dim` sampled states to `out_states` (row-major, one state per grid
/// node).
///
/// # Safety
/// `theta` must point to `param_dim` doubles, `x0` to `state_dim` doubles,
/// and `out_states` to `(num_intervals + 1) * state_dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn odefit_solve(
    model: *const OdefitModel,
    theta: *const f64,
    x0: *const f64,
    t0: f64,
    h: f64,
    num_intervals: usize,
    rtol: f64,
    atol: f64,
    out_states: *mut f64,
) -> OdefitStatus {
    guard(|| {
        if model.is_null() || out_states.is_null() {
            set_last_error("null model or output pointer");
            return OdefitStatus::NullPointer;
        }
        let field = &(*model).field;
        let n = field.state_dim();
        let (Some(theta), Some(x0)) = (
            read_vec(theta, field.param_dim()),
            read_vec(x0, n),
        ) else {
            set_last_error("null theta or x0 pointer");
            return OdefitStatus::NullPointer;
        };
        let grid = match TimeGrid::new(t0, h, num_intervals) {
            Ok(g) => g,
            Err(e) => {
                set_last_error(e.to_string());
                return OdefitStatus::InvalidArgument;
            }
        };
        let cfg = solver_config(rtol, atol);
        if cfg.validate().is_err() {
            set_last_error("rtol and atol must be positive");
            return OdefitStatus::InvalidArgument;
        }
        match solve(field, &theta, &x0, &grid, &cfg) {
            Ok(traj) => {
                let out = slice::from_raw_parts_mut(out_states, grid.num_nodes() * n);
                for (k, state) in traj.states.iter().enumerate() {
                    out[k * n..(k + 1) * n].copy_from_slice(state.as_slice());
                }
                OdefitStatus::Ok
            }
            Err(e) => {
                set_last_error(e.to_string());
                OdefitStatus::SolverFailure
            }
        }
    })
}

/// Trains parameters against a target trajectory.
///
/// `algorithm`: 0 = sensitivity-based gradient descent, 1 = alternating
/// collocation descent, 2 = alternating descent with state reset,
/// 3 = augmented Lagrangian. `targets` holds `(num_intervals + 1) *
/// state_dim` doubles (one state per grid node). The final parameters are
/// written to `theta_inout`, which supplies the initial guess on entry; the
/// final training SSE is written to `out_final_sse` when non-NULL.
///
/// # Safety
/// Pointer/length contracts as documented per argument; `theta_inout` must
/// hold `param_dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn odefit_train(
    model: *const OdefitModel,
    algorithm: u32,
    targets: *const f64,
    x0: *const f64,
    t0: f64,
    h: f64,
    num_intervals: usize,
    epochs: usize,
    seed: u64,
    theta_inout: *mut f64,
    out_final_sse: *mut f64,
) -> OdefitStatus {
    guard(|| {
        if model.is_null() || theta_inout.is_null() {
            set_last_error("null model or theta pointer");
            return OdefitStatus::NullPointer;
        }
        let field = &(*model).field;
        let n = field.state_dim();
        let p = field.param_dim();
        let kind = match algorithm {
            0 => AlgorithmKind::Alg0Direct,
            1 => AlgorithmKind::Alg1,
            2 => AlgorithmKind::Alg2,
            3 => AlgorithmKind::Alg3,
            other => {
                set_last_error(format!("unknown algorithm code {other}"));
                return OdefitStatus::InvalidArgument;
            }
        };
        let grid = match TimeGrid::new(t0, h, num_intervals) {
            Ok(g) => g,
            Err(e) => {
                set_last_error(e.to_string());
                return OdefitStatus::InvalidArgument;
            }
        };
        let (Some(x0), Some(theta0)) = (read_vec(x0, n), read_vec(theta_inout, p)) else {
            set_last_error("null x0 pointer");
            return OdefitStatus::NullPointer;
        };
        if targets.is_null() {
            set_last_error("null targets pointer");
            return OdefitStatus::NullPointer;
        }
        let flat = slice::from_raw_parts(targets, grid.num_nodes() * n);
        let targets: Vec<DVector<f64>> = flat
            .chunks_exact(n)
            .map(DVector::from_column_slice)
            .collect();

        let mut cfg = TrainConfig::for_algorithm(kind);
        cfg.epochs = epochs;
        cfg.seed = seed;
        // metric solves are skipped entirely over the FFI (no logging)
        cfg.rsse_every = usize::MAX;

        let outcome = match train(
            field,
            &IdentityObs,
            &targets,
            &x0,
            &theta0,
            &grid,
            &SolverConfig::default(),
            &cfg,
            &mut NullSink,
        ) {
            Ok(o) => o,
            Err(e) => {
                set_last_error(e.to_string());
                return OdefitStatus::InvalidArgument;
            }
        };

        let theta_out = slice::from_raw_parts_mut(theta_inout, p);
        theta_out.copy_from_slice(outcome.theta.as_slice());
        if !out_final_sse.is_null() {
            *out_final_sse = outcome
                .record
                .rows
                .last()
                .map(|r| r.sse)
                .unwrap_or(f64::NAN);
        }
        if outcome.status.is_failure() {
            set_last_error(format!("training ended with status {:?}", outcome.status));
            OdefitStatus::TrainingFailure
        } else {
            OdefitStatus::Ok
        }
    })
}
