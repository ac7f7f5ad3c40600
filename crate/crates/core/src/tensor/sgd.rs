//! Stochastic gradient descent with momentum.

use super::Tensor4;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Optimizer state: per-parameter velocity buffers, created lazily at the
/// first step and zero-initialized.
pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocities: HashMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be non-negative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(SgdMomentum {
            learning_rate,
            momentum,
            velocities: HashMap::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Apply one update to every parameter:
    /// `v <- momentum * v + grad; p <- p - lr * v`; gradients are cleared.
    ///
    /// Fails if any parameter has no gradient (step before backward).
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor4)>,
    {
        for (name, tensor) in params {
            let grad = tensor
                .take_grad()
                .ok_or_else(|| Error::StepBeforeBackward(name.to_string()))?;
            let velocity = self
                .velocities
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if velocity.len() != grad.len() {
                return Err(Error::invalid(format!(
                    "sgd velocity length changed for parameter `{name}`"
                )));
            }
            let lr = self.learning_rate;
            let m = self.momentum;
            for (p, (v, g)) in tensor.data_mut().iter_mut().zip(velocity.iter_mut().zip(&grad)) {
                *v = m * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn param(data: &[f64]) -> Tensor4 {
        let mut t = Tensor4::new(Shape4::new(1, 1, 1, data.len()), data.to_vec()).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn plain_descent_with_zero_momentum() {
        let mut p = param(&[1.0, -2.0]);
        p.accumulate_grad(&[0.25, -0.5]).unwrap();
        let mut opt = SgdMomentum::new(1.0, 0.0).unwrap();
        opt.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[0.75, -1.5]);
        assert!(p.grad().is_none(), "gradients are cleared after the step");
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = param(&[0.5, 0.5]);
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut opt = SgdMomentum::new(0.01, 0.9).unwrap();
        opt.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn momentum_matches_hand_iterated_recurrence() {
        // minimize f(x) = x^2 / 2, grad = x, lr 0.1, momentum 0.9
        let (lr, m) = (0.1, 0.9);
        let mut x = 3.0f64;
        let mut v = 0.0f64;
        let mut p = param(&[3.0]);
        let mut opt = SgdMomentum::new(lr, m).unwrap();
        for _ in 0..2 {
            p.accumulate_grad(&[p.data()[0]]).unwrap();
            opt.step([("x", &mut p)]).unwrap();
            v = m * v + x;
            x -= lr * v;
        }
        assert!((p.data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn step_before_backward_is_rejected() {
        let mut p = param(&[1.0]);
        let mut opt = SgdMomentum::new(0.01, 0.9).unwrap();
        let err = opt.step([("weights", &mut p)]).unwrap_err();
        assert!(err.to_string().contains("weights"));
    }

    #[test]
    fn constructor_validates_hyperparameters() {
        assert!(SgdMomentum::new(-0.1, 0.9).is_err());
        assert!(SgdMomentum::new(f64::NAN, 0.9).is_err());
        assert!(SgdMomentum::new(0.1, 1.0).is_err());
        assert!(SgdMomentum::new(0.1, -0.1).is_err());
        assert!(SgdMomentum::new(0.0, 0.9).is_ok(), "zero rate is a null update");
    }
}
