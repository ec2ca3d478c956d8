//! SGD with classical momentum.
//!
//! Update rule per parameter: v <- mu * v - lr * g; p <- p + v.
//! Velocity buffers are lazily created to match each parameter the first time
//! it is stepped, and shapes are re-validated on every step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct SgdMomentum<S: Scalar> {
    pub lr: S,
    pub momentum: S,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(lr: S, momentum: S) -> Self {
        SgdMomentum { lr, momentum, velocity: Vec::new() }
    }

    /// Apply one update to an ordered parameter list. The order must be the
    /// same on every call; the velocity buffers are keyed by position.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} gradient buffers", params.len()),
                format!("{}", grads.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![S::ZERO; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{} parameters (as on first step)", self.velocity.len()),
                format!("{}", params.len()),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.numel() != g.len() || p.numel() != v.len() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{:?} ({} values)", p.shape(), p.numel()),
                    format!("gradient of {} values", g.len()),
                ));
            }
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv - self.lr * *gv;
                *pv += *vv;
            }
        }
        Ok(())
    }
}
