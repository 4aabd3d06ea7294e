//! Momentum SGD.

use super::tensor::{HasParams, Param, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// `v ← μ·v + g + λ·w; w ← w − lr·v`, then zeroes the gradients.
///
/// All gradients are checked before any parameter moves, so a divergence
/// error leaves the model untouched. Buffers are skipped.
pub fn sgd_step<T: Scalar, M: HasParams<T> + ?Sized>(model: &mut M, cfg: &SgdConfig, iter: usize) -> Result<()> {
    cfg.validate()?;
    let mut bad: Option<String> = None;
    model.visit_params(&mut |p: &mut Param<T>| {
        if bad.is_none() && p.trainable && !p.grad.all_finite() {
            bad = Some(format!("non-finite gradient in `{}`", p.name));
        }
    });
    if let Some(reason) = bad {
        return Err(Error::Divergence { iter, reason });
    }
    let (lr, mu, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    model.visit_params(&mut |p: &mut Param<T>| {
        if !p.trainable {
            return;
        }
        let Param { value, grad, momentum, .. } = p;
        for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data_mut()).zip(momentum.data_mut()) {
            *v = mu * *v + *g + wd * *w;
            *w -= lr * *v;
            *g = T::zero();
        }
    });
    Ok(())
}
