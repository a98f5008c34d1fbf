//! SGD with Nesterov momentum, cosine annealing, and the EMA replica update.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Cosine annealing from `initial_lr` down to `min_lr` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub initial_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    /// `min_lr + ½(initial_lr − min_lr)(1 + cos(π·step/total_steps))`.
    ///
    /// Evaluated as a convex combination so both endpoints come out exact.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Config(format!(
                "schedule step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        if self.total_steps == 0 {
            return Ok(self.initial_lr);
        }
        let w = 0.5 * (1.0 + (PI * step as f64 / self.total_steps as f64).cos());
        Ok(self.initial_lr * w + self.min_lr * (1.0 - w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Rate of the independent heads and of module updates driven by them (η_d).
    pub lr_independent: f64,
    /// Rate of the cascaded heads (η_c).
    pub lr_cascaded: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: CosineSchedule,
}

impl OptimizerConfig {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, total_steps: u64) -> Self {
        OptimizerConfig {
            lr_independent: lr,
            lr_cascaded: lr,
            momentum,
            weight_decay,
            schedule: CosineSchedule {
                initial_lr: lr,
                min_lr: 0.0,
                total_steps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("optimizer.lr", self.lr_independent),
            ("optimizer.lr_cascaded", self.lr_cascaded),
            ("optimizer.weight_decay", self.weight_decay),
            ("optimizer.min_lr", self.schedule.min_lr),
        ];
        for (key, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(key, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(
                "optimizer.momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        Ok(())
    }

    /// Multiplier applied to cascaded-loss gradients so that, stepped at the
    /// scheduled independent rate, they move parameters at η_c.
    pub fn cascade_scale(&self) -> f64 {
        if self.lr_independent > 0.0 {
            self.lr_cascaded / self.lr_independent
        } else {
            0.0
        }
    }
}

/// One Nesterov step on a single parameter:
/// `g' = grad + wd·value; v ← μv + g'; value ← value − lr(g' + μv)`.
pub fn nesterov_update<T: Element>(
    value: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    let iter = value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut());
    for ((w, &g), v) in iter {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * (g + momentum * *v);
    }
}

/// Applies [`nesterov_update`] to every trainable parameter not rejected by
/// `skip`, then zeroes all gradients.
pub fn sgd_nesterov_step<T: Element>(
    store: &mut ParamStore<T>,
    cfg: &OptimizerConfig,
    lr_now: f64,
    skip: impl Fn(ParamId) -> bool,
) {
    let lr = T::from_f64_lossy(lr_now);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for (i, p) in store.params_mut().iter_mut().enumerate() {
        if p.trainable && !skip(ParamId(i)) {
            nesterov_update(&mut p.value, &p.grad, &mut p.velocity, lr, mu, wd);
        }
        p.grad.fill(T::zero());
    }
}

/// `λ ← r·λ + (1−r)·source`, elementwise.
pub fn ema_update<T: Element>(target: &mut Tensor<T>, source: &Tensor<T>, rate: f64) -> Result<()> {
    if target.shape() != source.shape() {
        return Err(Error::shape(
            "ema_update",
            format!("{:?} vs {:?}", target.shape(), source.shape()),
        ));
    }
    let r = T::from_f64_lossy(rate);
    let keep = T::one() - r;
    for (l, &s) in target.data_mut().iter_mut().zip(source.data()) {
        *l = r * *l + keep * s;
    }
    Ok(())
}

/// A coefficient `constant + slope·r`, kept symbolic in the EMA rate `r`.
/// Constants are small integers, so merging terms is exact.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RateCoef {
    pub constant: f64,
    pub slope: f64,
}

impl RateCoef {
    pub const ZERO: RateCoef = RateCoef {
        constant: 0.0,
        slope: 0.0,
    };

    pub fn new(constant: f64, slope: f64) -> Self {
        RateCoef { constant, slope }
    }

    pub fn plus(self, other: RateCoef) -> Self {
        RateCoef {
            constant: self.constant + other.constant,
            slope: self.slope + other.slope,
        }
    }

    pub fn eval(self, r: f64) -> f64 {
        self.constant + self.slope * r
    }
}

/// Canonical form of a final-member update: `θ ← θ − ema(r)·λ − grad(r)·η·∇`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateForm {
    pub ema: RateCoef,
    pub grad: RateCoef,
}

impl UpdateForm {
    /// `θ − η∇ − {rλ + (1−r)η∇}`, accumulated term by term.
    pub fn expanded() -> Self {
        let mut form = UpdateForm::default();
        // independent gradient step
        form.grad = form.grad.plus(RateCoef::new(1.0, 0.0));
        // bracketed EMA term
        form.ema = form.ema.plus(RateCoef::new(0.0, 1.0));
        form.grad = form.grad.plus(RateCoef::new(1.0, -1.0));
        form
    }

    /// `θ − rλ − (2−r)η∇`.
    pub fn collapsed() -> Self {
        UpdateForm {
            ema: RateCoef::new(0.0, 1.0),
            grad: RateCoef::new(2.0, -1.0),
        }
    }

    /// Applies the update in place. `lambda` must already be aligned to `theta`.
    pub fn apply<T: Element>(&self, theta: &mut [T], lambda: &[T], grad: &[T], eta: f64, r: f64) -> Result<()> {
        if theta.len() != lambda.len() || theta.len() != grad.len() {
            return Err(Error::shape(
                "mlaan_update",
                format!("θ {} / λ {} / ∇ {}", theta.len(), lambda.len(), grad.len()),
            ));
        }
        let a = T::from_f64_lossy(self.ema.eval(r));
        let b = T::from_f64_lossy(self.grad.eval(r) * eta);
        for ((t, &l), &g) in theta.iter_mut().zip(lambda).zip(grad) {
            *t = *t - a * l - b * g;
        }
        Ok(())
    }
}

/// Flattened `λ` truncated or zero-padded to `len` entries.
pub fn align_flat<T: Element>(lambda: &[T], len: usize) -> Vec<T> {
    let mut out: Vec<T> = lambda.iter().copied().take(len).collect();
    out.resize(len, T::zero());
    out
}
