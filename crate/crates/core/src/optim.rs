//! SGD with momentum and weight decay on convolution kernels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// `v <- momentum * v + g`, `theta <- theta - lr * (v + wd * theta)`.
///
/// Parameters for which `frozen` is true are skipped entirely; a trainable
/// parameter missing from `grads` is treated as having zero gradient.
pub fn sgd_step(
    params: &mut Params,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut SgdState,
    config: &SgdConfig,
    frozen: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("{name}: {} values, gradient has {}", p.len(), g.len()),
            ));
        }
    }
    for (name, theta) in params.iter_mut() {
        if frozen(name) {
            continue;
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; theta.len()]);
        let g = grads.get(name);
        let wd = if decays(name) { config.weight_decay } else { 0.0 };
        for (i, x) in theta.data_mut().iter_mut().enumerate() {
            v[i] = config.momentum * v[i] + g.map_or(0.0, |g| g[i]);
            *x -= config.learning_rate * (v[i] + wd * *x);
        }
    }
    Ok(())
}
