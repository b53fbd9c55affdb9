//! First-order update rules over flat parameter blocks: plain SGD and Adam.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{OdefitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Kind plus learning rate; the runtime state lives in [`Optimizer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl OptimizerSpec {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
        }
    }

    pub fn build(&self, dim: usize) -> Optimizer {
        match self.kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr: self.lr }),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.lr, dim)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    /// `x <- x - lr * grad`.
    pub fn step(&self, x: &mut DVector<f64>, grad: &DVector<f64>) -> Result<()> {
        check_grad(x, grad)?;
        x.axpy(-self.lr, grad, 1.0);
        Ok(())
    }
}

/// Adam with bias correction; `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut DVector<f64>, grad: &DVector<f64>) -> Result<()> {
        check_grad(x, grad)?;
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            x[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, x: &mut DVector<f64>, grad: &DVector<f64>) -> Result<()> {
        match self {
            Optimizer::Sgd(s) => s.step(x, grad),
            Optimizer::Adam(a) => a.step(x, grad),
        }
    }
}

fn check_grad(x: &DVector<f64>, grad: &DVector<f64>) -> Result<()> {
    if x.len() != grad.len() {
        return Err(OdefitError::DimensionMismatch {
            context: "optimizer step",
            expected: x.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OdefitError::NonFinite("gradient"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sgd_arithmetic() {
        let sgd = Sgd { lr: 0.1 };
        let mut x = DVector::from_element(1, 1.0);
        sgd.step(&mut x, &DVector::from_element(1, 2.0)).unwrap();
        assert_eq!(x[0], 0.8);

        let mut y = DVector::from_vec(vec![3.0, -4.0]);
        sgd.step(&mut y, &DVector::zeros(2)).unwrap();
        assert_eq!(y, DVector::from_vec(vec![3.0, -4.0]));
    }

    #[test]
    fn sgd_contracts_quadratic() {
        // grad of x^2/2 is x; with lr 0.1 each step multiplies by 0.9
        let sgd = Sgd { lr: 0.1 };
        let mut x = DVector::from_element(1, 1.0);
        for k in 1..=20 {
            let g = x.clone();
            sgd.step(&mut x, &g).unwrap();
            assert_abs_diff_eq!(x[0], 0.9f64.powi(k), epsilon = 1e-12);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut adam = Adam::new(0.01, 2);
        let mut x = DVector::from_vec(vec![1.0, 1.0]);
        adam.step(&mut x, &DVector::from_vec(vec![5.0, -0.003]))
            .unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        assert_abs_diff_eq!(x[0], 1.0 - 0.01, epsilon = 1e-8);
        assert_abs_diff_eq!(x[1], 1.0 + 0.01, epsilon = 1e-5);
    }

    #[test]
    fn adam_constant_gradient_keeps_unit_scale() {
        let mut adam = Adam::new(0.01, 1);
        let mut x = DVector::from_element(1, 0.0);
        let g = DVector::from_element(1, 2.0);
        adam.step(&mut x, &g).unwrap();
        let x1 = x[0];
        adam.step(&mut x, &g).unwrap();
        let x2 = x[0];
        // bias correction keeps both updates near lr in magnitude
        assert!((x1 + 0.01).abs() < 1e-6);
        assert!(((x2 - x1).abs() - 0.01).abs() < 1e-4);
    }

    #[test]
    fn adam_zero_gradient_never_moves() {
        let mut adam = Adam::new(0.5, 3);
        let mut x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        for _ in 0..10 {
            adam.step(&mut x, &DVector::zeros(3)).unwrap();
        }
        assert_eq!(x, DVector::from_vec(vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn nonfinite_gradients_are_rejected() {
        let sgd = Sgd { lr: 0.1 };
        let mut x = DVector::from_element(1, 1.0);
        assert!(sgd
            .step(&mut x, &DVector::from_element(1, f64::NAN))
            .is_err());
        let mut adam = Adam::new(0.1, 1);
        assert!(adam
            .step(&mut x, &DVector::from_element(1, f64::INFINITY))
            .is_err());
    }

    proptest! {
        #[test]
        fn adam_update_magnitude_bounded_by_lr(
            g in prop::collection::vec(-1e6f64..1e6, 1..8),
            lr in 1e-4f64..1.0,
        ) {
            let dim = g.len();
            let mut adam = Adam::new(lr, dim);
            let mut x = DVector::zeros(dim);
            let grad = DVector::from_vec(g);
            adam.step(&mut x, &grad).unwrap();
            for i in 0..dim {
                prop_assert!(x[i].abs() <= lr * 1.0001);
            }
        }

        #[test]
        fn steps_are_deterministic(
            g in prop::collection::vec(-10.0f64..10.0, 1..6),
        ) {
            let dim = g.len();
            let grad = DVector::from_vec(g);
            let mut a1 = Adam::new(0.01, dim);
            let mut a2 = Adam::new(0.01, dim);
            let mut x1 = DVector::from_element(dim, 0.5);
            let mut x2 = DVector::from_element(dim, 0.5);
            a1.step(&mut x1, &grad).unwrap();
            a2.step(&mut x2, &grad).unwrap();
            prop_assert_eq!(x1, x2);
        }
    }
}
