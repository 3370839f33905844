use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Real;

/// Momentum SGD with L2 weight decay and a step-wise learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdHyper {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper {
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_factor: 0.1,
            lr_decay_every: 50_000,
        }
    }
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` before the per-parameter multiplier.
    pub fn lr_at(&self, step: u64) -> f64 {
        let decays = (step / self.lr_decay_every) as i32;
        self.base_lr * self.lr_decay_factor.powi(decays)
    }
}

/// One SGD step over every parameter. Parameters whose effective rate is zero (frozen, or `base_lr == 0`)
/// are skipped entirely, momentum included.
pub fn sgd_update<T: Real>(store: &mut ParamStore<T>, hyper: &SgdHyper, step: u64) -> Result<()> {
    let lr = hyper.lr_at(step);
    let momentum = T::lit(hyper.momentum);
    let decay = T::lit(hyper.weight_decay);
    for p in store.iter_mut() {
        if p.is_frozen() {
            continue;
        }
        if p.grad.shape() != p.value.shape() || p.momentum_buf.shape() != p.value.shape() {
            return Err(Error::shape(
                format!("sgd({})", p.name),
                format!("grad {:?} vs value {:?}", p.grad.shape(), p.value.shape()),
            ));
        }
        let eff = lr * p.lr_mult as f64;
        if eff == 0.0 {
            continue;
        }
        let eff = T::lit(eff);
        let v = p.momentum_buf.data_mut();
        let x = p.value.data_mut();
        for ((vi, xi), &gi) in v.iter_mut().zip(x.iter_mut()).zip(p.grad.data()) {
            *vi = momentum * *vi - eff * (gi + decay * *xi);
            *xi += *vi;
        }
    }
    Ok(())
}
