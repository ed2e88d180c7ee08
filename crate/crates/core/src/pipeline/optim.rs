use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::Tensor;

/// Momentum buffers, one per trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            velocity: params
                .trainable()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Classic momentum: `v ← momentum·v + g`, `θ ← θ − lr·v`.
///
/// Every trainable parameter needs a gradient and a velocity of its shape.
pub fn sgd_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !(lr >= 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "need lr >= 0 and momentum in [0, 1), got lr={lr} momentum={momentum}"
        )));
    }
    let names: Vec<String> = params.trainable().map(|(k, _)| k.to_string()).collect();
    if grads.len() != names.len() || state.velocity.len() != names.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd_step: {} parameters, {} gradients, {} velocities",
            names.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for name in &names {
        let p = params.get(name)?;
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}")))?;
        let v = state
            .velocity
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no velocity for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("sgd_step (gradient)", p.shape(), g.shape()));
        }
        if v.shape() != p.shape() {
            return Err(Error::shape("sgd_step (velocity)", p.shape(), v.shape()));
        }
    }
    for name in &names {
        let g = grads[name].data();
        let v = state.velocity.get_mut(name).expect("checked above").data_mut();
        let p = params.get_mut(name).expect("checked above").data_mut();
        for i in 0..p.len() {
            v[i] = momentum * v[i] + g[i];
            p[i] -= lr * v[i];
        }
    }
    Ok(())
}
