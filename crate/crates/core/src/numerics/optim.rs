//! AdamW, global-norm gradient clipping and a reduce-on-plateau schedule.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// Optimizer state: one first/second moment buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.value.numel()]).collect();
        Ok(Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One decoupled-weight-decay Adam update of every parameter.
///
/// Each parameter is first scaled by `1 - lr * weight_decay`, then moved by
/// the bias-corrected moment ratio. Every parameter must carry a gradient.
pub fn adamw_step<T: Real>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match the parameter set".into()));
    }
    if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let lr = T::c(c.lr);
    let decay = T::c(1.0 - c.lr * c.weight_decay);
    let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
    let bc1 = T::c(1.0 - c.beta1.powi(t));
    let bc2 = T::c(1.0 - c.beta2.powi(t));
    let eps = T::c(c.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad.as_ref().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            *w = *w * decay;
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Global L2 norm over every present gradient.
pub fn global_grad_norm<T: Real>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let scale = T::c(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|v| *v = *v * scale);
            }
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` once validation loss has failed
/// to strictly improve for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    pub patience: usize,
    pub factor: f64,
    pub current_lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        assert!(patience > 0 && factor > 0.0 && factor < 1.0 && lr > 0.0);
        Self {
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            patience,
            factor,
            current_lr: lr,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate to use next.
    pub fn step(&mut self, validation_loss: f64) -> f64 {
        if validation_loss < self.best_loss {
            self.best_loss = validation_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.current_lr *= self.factor;
                self.epochs_since_improvement = 0;
            }
        }
        self.current_lr
    }
}
