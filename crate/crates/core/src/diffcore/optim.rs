use serde::{Deserialize, Serialize};

use crate::diffcore::model::Model;
use crate::diffcore::tensor::Real;
use crate::error::{Error, Result};

/// Step decay: `base · factor^(milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(base: f64, milestones: Vec<usize>, factor: f64) -> Result<Self> {
        if !(base >= 0.0) || !base.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {}", base)));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "milestones must be strictly increasing: {:?}",
                milestones
            )));
        }
        Ok(LrSchedule {
            base,
            milestones,
            factor,
        })
    }

    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.factor.powi(passed as i32)
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct OptimState<T> {
    velocity: Vec<Vec<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Real> OptimState<T> {
    pub fn new(model: &Model<T>, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} not in [0, 1)", momentum)));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("weight decay {}", weight_decay)));
        }
        Ok(OptimState {
            velocity: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
            lr,
            momentum,
            weight_decay,
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

/// `v ← momentum·v + grad + wd·θ; θ ← θ − lr·v`, then clears gradients.
pub fn sgd_step<T: Real>(model: &mut Model<T>, opt: &mut OptimState<T>) -> Result<()> {
    for (i, p) in model.params().iter().enumerate() {
        if p.requires_grad && p.grad.is_none() {
            return Err(Error::MissingGrad(i));
        }
    }
    let (lr, mom, wd) = (T::lit(opt.lr), T::lit(opt.momentum), T::lit(opt.weight_decay));
    for (p, v) in model.params_mut().iter_mut().zip(&mut opt.velocity) {
        if !p.requires_grad {
            continue;
        }
        let g = p.grad.take().expect("checked above");
        let data = p.data_mut();
        for ((theta, vel), grad) in data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = mom * *vel + grad + wd * *theta;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}
