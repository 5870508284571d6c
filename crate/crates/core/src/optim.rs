//! Learnable parameters and stochastic gradient descent.

use crate::error::{FerError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub frozen: bool,
    velocity: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Parameter {
            value,
            frozen: false,
            velocity: None,
        }
    }

    /// Drops accumulated momentum.
    pub fn reset_velocity(&mut self) {
        self.velocity = None;
    }
}

/// SGD with optional heavy-ball momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(FerError::config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(FerError::config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Sgd { lr, momentum })
    }

    /// Updates every unfrozen parameter. Nothing is modified if any gradient is non-finite.
    pub fn step<T: Scalar>(&self, params: &mut [&mut Parameter<T>], grads: &[&Tensor<T>]) -> Result<()> {
        check_grads(params, grads)?;
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        for (p, g) in params.iter_mut().zip(grads) {
            if p.frozen {
                continue;
            }
            if self.momentum == 0.0 {
                for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * d;
                }
                continue;
            }
            let v = p
                .velocity
                .get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, &d) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi + d;
            }
            let v = p.velocity.as_ref().expect("velocity initialized above");
            for (w, &vi) in p.value.data_mut().iter_mut().zip(v.data()) {
                *w = *w - lr * vi;
            }
        }
        Ok(())
    }
}

fn check_grads<T: Scalar>(params: &[&mut Parameter<T>], grads: &[&Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(FerError::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        g.expect_shape(p.value.shape())?;
        if !p.frozen && !g.all_finite() {
            return Err(FerError::Training(format!(
                "non-finite gradient for parameter {i}"
            )));
        }
    }
    Ok(())
}

/// Plain SGD: `param ← param − lr·grad` for every unfrozen parameter.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    grads: &[&Tensor<T>],
    lr: f64,
) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(FerError::config(format!("learning rate must be >= 0, got {lr}")));
    }
    check_grads(params, grads)?;
    let lr = T::from_f64(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        if p.frozen {
            continue;
        }
        for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w = *w - lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = Parameter::new(scalar(1.0));
        sgd_step(&mut [&mut p], &[&scalar(0.5)], 0.1).unwrap();
        assert!((p.value.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_and_frozen_are_noops() {
        let mut p = Parameter::new(scalar(1.0));
        sgd_step(&mut [&mut p], &[&scalar(0.5)], 0.0).unwrap();
        assert_eq!(p.value.data(), &[1.0]);

        p.frozen = true;
        sgd_step(&mut [&mut p], &[&scalar(3.0)], 0.1).unwrap();
        Sgd::new(0.1, 0.9).unwrap().step(&mut [&mut p], &[&scalar(3.0)]).unwrap();
        assert_eq!(p.value.data(), &[1.0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut a = Parameter::new(scalar(1.0));
        let mut b = Parameter::new(scalar(2.0));
        let r = sgd_step(&mut [&mut a, &mut b], &[&scalar(1.0), &scalar(f64::NAN)], 0.1);
        assert!(matches!(r, Err(FerError::Training(_))));
        assert_eq!(a.value.data(), &[1.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let opt = Sgd::new(0.1, 0.9).unwrap();
        let mut p = Parameter::new(scalar(0.0));
        opt.step(&mut [&mut p], &[&scalar(1.0)]).unwrap();
        opt.step(&mut [&mut p], &[&scalar(1.0)]).unwrap();
        // v1 = 1, v2 = 1.9
        assert!((p.value.data()[0] + 0.29).abs() < 1e-12);
    }
}
