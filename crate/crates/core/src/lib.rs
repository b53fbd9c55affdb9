//! Parameter estimation for ODE models from sampled trajectories.
//!
//! The trainable object is a pair `(x, theta)`: a free state trajectory on a
//! uniform time grid and the model parameters. Collocation residuals tie the
//! trajectory to the ODE without running a solver inside the training loop;
//! alternating gradient updates on the two blocks do the optimization. A
//! forward-sensitivity gradient-descent baseline and a benchmark harness for
//! the Cucker-Smale flocking model round out the crate.

pub mod algorithms;
pub mod collocation;
pub mod cucker_smale;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod ode_solver;
pub mod optimizers;
pub mod sensitivity;
pub mod vector_field;

pub use error::{OdefitError, Result};
