//! SGD and RMSProp update rules and piecewise-constant learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Gradients;
use crate::model::ParamMut;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Rmsprop { decay: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub const RMSPROP_DECAY: f64 = 0.999;
    pub const RMSPROP_EPSILON: f64 = 1e-8;

    pub fn rmsprop() -> Self {
        OptimizerKind::Rmsprop {
            decay: Self::RMSPROP_DECAY,
            epsilon: Self::RMSPROP_EPSILON,
        }
    }
}

/// Optimizer hyper-parameters plus one accumulator per parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer<T = f32> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Tensor<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        match kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::Optimizer(format!("momentum {momentum} outside [0, 1)")));
            }
            OptimizerKind::Rmsprop { decay, epsilon } if !(decay > 0.0 && decay < 1.0) || epsilon <= 0.0 => {
                return Err(Error::Optimizer(format!(
                    "rmsprop decay {decay} / epsilon {epsilon} invalid"
                )));
            }
            _ => {}
        }
        if !(lr >= 0.0 && lr.is_finite()) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Optimizer(format!(
                "lr {lr} / weight decay {weight_decay} invalid"
            )));
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            state: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd { momentum }, lr, weight_decay)
    }

    pub fn rmsprop(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::rmsprop(), lr, weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Momentum buffer (SGD) or squared-gradient average (RMSProp) for `name`.
    pub fn accumulator(&self, name: &str) -> Option<&Tensor<T>> {
        self.state.get(name)
    }

    /// Applies one update to every parameter. All gradients are validated before
    /// anything is modified, so a failed step leaves parameters untouched.
    pub fn step(&mut self, params: Vec<ParamMut<'_, T>>, grads: &Gradients<T>) -> Result<()> {
        for p in &params {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| Error::Optimizer(format!("no gradient for parameter {}", p.name)))?;
            if g.dims() != p.value.dims() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    left: p.value.dims().to_vec(),
                    right: g.dims().to_vec(),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
        }
        let lr = T::lit(self.lr);
        let wd = T::lit(self.weight_decay);
        for p in params {
            let g = &grads[&p.name];
            let acc = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(g.dims()).expect("shape of an existing tensor"));
            let decay_term = if p.decay { wd } else { T::zero() };
            let values = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::lit(momentum);
                    for ((w, &gi), v) in values.iter_mut().zip(g.data()).zip(acc.data_mut()) {
                        let gi = gi + decay_term * *w;
                        *v = mu * *v + gi;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Rmsprop { decay, epsilon } => {
                    let rho = T::lit(decay);
                    let one_minus = T::lit(1.0 - decay);
                    let eps = T::lit(epsilon);
                    for ((w, &gi), s) in values.iter_mut().zip(g.data()).zip(acc.data_mut()) {
                        let gi = gi + decay_term * *w;
                        *s = rho * *s + one_minus * gi * gi;
                        *w -= lr * gi / (*s + eps).sqrt();
                    }
                }
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Piecewise-constant learning rate: `(first epoch, lr)` pairs, boundaries inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Optimizer("empty learning-rate schedule".into()));
        }
        if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Optimizer(
                "schedule boundaries must be strictly increasing".into(),
            ));
        }
        if steps.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Optimizer(
                "schedule learning rates must be finite and non-negative".into(),
            ));
        }
        Ok(LrSchedule { steps })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(vec![(0, lr)])
    }

    /// `lr` until half the epochs, then ÷10, and ÷100 from three quarters on.
    pub fn step_decay(lr: f64, epochs: usize) -> Result<Self> {
        let mut steps = vec![(0, lr)];
        for (boundary, div) in [(epochs / 2, 10.0), (epochs * 3 / 4, 100.0)] {
            if boundary > steps.last().expect("non-empty").0 {
                steps.push((boundary, lr / div));
            }
        }
        Self::new(steps)
    }

    pub fn steps(&self) -> &[(usize, f64)] {
        &self.steps
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.steps
            .iter()
            .take_while(|&&(start, _)| start <= epoch)
            .last()
            .map_or(self.steps[0].1, |&(_, lr)| lr)
    }
}
