//! SGD with momentum and learning-rate schedules.

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamSet};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
///
/// `velocity = momentum·velocity + grad + weight_decay·param; param -= lr·velocity`.
/// Only [`ParamKind::Trainable`] entries are updated; ψ decays like any other weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        for (name, e) in params.iter_mut() {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; e.value.len()]);
            if v.len() != e.value.len() || e.grad.len() != e.value.len() {
                return Err(Error::dim("sgd_step", format!("{name}: buffer sizes differ")));
            }
            let grad = e.grad.data().to_vec();
            for ((p, g), vel) in e.value.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + g + self.weight_decay * *p;
                *p -= lr * *vel;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schedule", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` at each milestone epoch reached.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Half-cosine decay to zero at `epochs`.
    Cosine { epochs: usize },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Step { milestones, gamma } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!("milestones {milestones:?} are not strictly increasing")));
                }
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return Err(Error::Config(format!("step gamma {gamma} outside (0, 1]")));
                }
            }
            Schedule::Cosine { epochs } if *epochs == 0 => {
                return Err(Error::Config("cosine schedule needs a positive epoch count".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Learning rate for a (zero-based) epoch.
pub fn lr_at(base: f64, schedule: &Schedule, epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::Config(format!("negative epoch {epoch}")));
    }
    Ok(match schedule {
        Schedule::Constant => base,
        Schedule::Step { milestones, gamma } => {
            let k = milestones.iter().filter(|&&m| m as i64 <= epoch).count();
            base * gamma.powi(k as i32)
        }
        Schedule::Cosine { epochs } => base * 0.5 * (1.0 + (PI * epoch as f64 / *epochs as f64).cos()),
    })
}
