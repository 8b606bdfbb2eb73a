//! SGD with momentum, Adam, exponential learning-rate decay and decoupled
//! weight decay.

use crate::autograd::GradientMap;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPS }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `v ← momentum·v + g; p ← p − lr·v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    same_shape(param, grad, "sgd")?;
    same_shape(param, velocity, "sgd")?;
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam update for step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    same_shape(param, grad, "adam")?;
    same_shape(param, m, "adam")?;
    same_shape(param, v, "adam")?;
    let t = t.max(1) as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let moments = m.data_mut().iter_mut().zip(v.data_mut());
    for ((p, &g), (m, v)) in param.data_mut().iter_mut().zip(grad.data()).zip(moments) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

/// `lr₀ · decay^epoch`.
pub fn lr_schedule(lr0: f64, decay: f64, epoch: u64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Decoupled decay `p ← p·(1 − lr·rate)`.
pub fn apply_weight_decay(param: &mut Tensor, lr: f64, rate: f64) {
    if rate == 0.0 {
        return;
    }
    let keep = 1.0 - lr * rate;
    param.data_mut().iter_mut().for_each(|p| *p *= keep);
}

/// Per-parameter moments, step counter and current learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub t: u64,
    pub lr: f64,
    /// Velocity (SGD) or first moment (Adam), indexed by parameter id.
    pub first: Vec<Tensor>,
    /// Second moment (Adam only).
    pub second: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub decay: f64,
    pub weight_decay: f64,
    pub state: OptimState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr0: f64, decay: f64, weight_decay: f64, store: &ParamStore) -> Result<Self> {
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr0}")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::config(format!("lr decay must lie in (0, 1], got {decay}")));
        }
        if weight_decay.is_nan() || weight_decay < 0.0 {
            return Err(Error::config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Ok(Optimizer { kind, lr0, decay, weight_decay, state: OptimState { t: 0, lr: lr0, first: zeros, second } })
    }

    pub fn set_epoch(&mut self, epoch: u64) {
        self.state.lr = lr_schedule(self.lr0, self.decay, epoch);
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    /// One update of every parameter that has a gradient, in id order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap) -> Result<()> {
        self.state.t += 1;
        let lr = self.state.lr;
        for (id, grad) in grads.iter() {
            let param = store.get_mut(id);
            apply_weight_decay(param, lr, self.weight_decay);
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    sgd_momentum_step(param, grad, &mut self.state.first[id.0], lr, momentum)?
                }
                OptimizerKind::Adam { beta1, beta2, eps } => adam_step(
                    param,
                    grad,
                    &mut self.state.first[id.0],
                    &mut self.state.second[id.0],
                    self.state.t,
                    lr,
                    beta1,
                    beta2,
                    eps,
                )?,
            }
        }
        Ok(())
    }
}
