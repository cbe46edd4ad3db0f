//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_grad<T: Scalar>(i: usize, p: &Param<T>) -> Result<()> {
    if p.grad.shape() != p.value.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} for parameter {:?}",
            p.grad.shape(),
            p.value.shape()
        )));
    }
    p.grad.ensure_finite(&format!("gradient of parameter {i}"))
}

/// Adadelta with per-element running averages of squared gradients and
/// squared updates.
///
/// ```text
/// E[g^2]  <- rho E[g^2] + (1 - rho) g^2
/// dx      <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
/// E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
/// x       <- x + dx
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adadelta<T> {
    pub rho: f64,
    pub eps: f64,
    /// `(E[g^2], E[dx^2])` per parameter tensor, created on the first step.
    state: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Default for Adadelta<T> {
    fn default() -> Self {
        Self::new(0.95, 1e-6).expect("valid defaults")
    }
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) || eps <= 0.0 {
            return Err(Error::invalid(format!("adadelta needs rho in (0,1) and eps > 0, got {rho}, {eps}")));
        }
        Ok(Self { rho, eps, state: Vec::new() })
    }

    pub fn state(&self) -> &[(Tensor<T>, Tensor<T>)] {
        &self.state
    }

    /// Restores accumulators, e.g. from a checkpoint.
    pub fn with_state(mut self, state: Vec<(Tensor<T>, Tensor<T>)>) -> Self {
        self.state = state;
        self
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            check_grad(i, p)?;
        }
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| Ok((Tensor::zeros(p.value.shape())?, Tensor::zeros(p.value.shape())?)))
                .collect::<Result<_>>()?;
        }
        if self.state.len() != params.len()
            || self.state.iter().zip(params.iter()).any(|((a, _), p)| a.shape() != p.value.shape())
        {
            return Err(Error::shape("optimizer state does not match the parameter list"));
        }
        let rho = T::from_f64_lossy(self.rho);
        let one_minus = T::from_f64_lossy(1.0 - self.rho);
        let eps = T::from_f64_lossy(self.eps);
        for (p, (sq_grad, sq_update)) in params.iter_mut().zip(self.state.iter_mut()) {
            let Param { value, grad } = &mut **p;
            let cells = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(sq_grad.data_mut().iter_mut().zip(sq_update.data_mut()));
            for ((x, &g), (eg, ed)) in cells {
                *eg = rho * *eg + one_minus * g * g;
                let dx = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
                *ed = rho * *ed + one_minus * dx * dx;
                *x += dx;
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, `x <- x - lr g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Result<Self> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and non-negative")));
        }
        Ok(Self { lr })
    }

    pub fn step<T: Scalar>(&self, params: &mut [&mut Param<T>]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            check_grad(i, p)?;
        }
        let lr = T::from_f64_lossy(self.lr);
        for p in params.iter_mut() {
            let Param { value, grad } = &mut **p;
            for (x, &g) in value.data_mut().iter_mut().zip(grad.data()) {
                *x -= lr * g;
            }
        }
        Ok(())
    }
}
