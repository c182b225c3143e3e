//! One-step integrators for the gradient flow `Ẋ = −∇L(X)`.
//!
//! Explicit Euler with step `lr` is plain SGD. Adam is not an ODE integrator in the strict
//! sense but is used the same way: one call advances one tensor by one step.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IntegratorKind {
    Euler { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl IntegratorKind {
    pub const DEFAULT_EULER_LR: f64 = 0.2;
    pub const DEFAULT_ADAM_LR: f64 = 1e-3;

    pub fn euler(lr: f64) -> Self {
        IntegratorKind::Euler { lr }
    }

    pub fn adam(lr: f64) -> Self {
        IntegratorKind::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            IntegratorKind::Euler { lr } | IntegratorKind::Adam { lr, .. } => lr,
        }
    }

    /// Same integrator with a different step size; Adam moments are unaffected.
    pub fn with_lr(&self, new_lr: f64) -> Self {
        let mut out = *self;
        match &mut out {
            IntegratorKind::Euler { lr } | IntegratorKind::Adam { lr, .. } => *lr = new_lr,
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            IntegratorKind::Euler { lr } if lr > 0.0 && lr.is_finite() => Ok(()),
            IntegratorKind::Adam { lr, beta1, beta2, eps }
                if lr > 0.0
                    && lr.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0 =>
            {
                Ok(())
            }
            _ => Err(Error::invalid(format!("invalid integrator {self:?}"))),
        }
    }
}

/// Which tensor of a layer a parameter is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamTag {
    K,
    L,
    S,
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub tag: ParamTag,
}

impl ParamId {
    pub fn new(layer: usize, tag: ParamTag) -> Self {
        ParamId { layer, tag }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} {:?}", self.layer, self.tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub shape: (usize, usize),
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    fn fresh(shape: (usize, usize)) -> Self {
        let n = shape.0 * shape.1;
        AdamState { shape, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Adam moments keyed by parameter. Empty when integrating with Euler.
#[derive(Debug, Clone, Default)]
pub struct OptimizerStates {
    states: BTreeMap<ParamId, AdamState>,
}

impl OptimizerStates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(&id)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Drops moments and step counter for `id`. Unknown ids are ignored.
    pub fn reset_state(&mut self, id: ParamId) {
        self.states.remove(&id);
    }

    /// Drops every entry belonging to one layer.
    pub fn reset_layer(&mut self, layer: usize) {
        self.states.retain(|id, _| id.layer != layer);
    }
}

/// Advances a matrix parameter by one integrator step.
pub fn one_step_integrate(
    param: &mut Matrix,
    grad: &Matrix,
    kind: &IntegratorKind,
    states: &mut OptimizerStates,
    id: ParamId,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::invalid(format!(
            "{id}: parameter {:?} vs gradient {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let shape = param.shape();
    integrate_slice(param.as_mut_slice(), grad.as_slice(), shape, kind, states, id)
}

/// Vector variant of [`one_step_integrate`], used for biases.
pub fn one_step_integrate_vec(
    param: &mut [f64],
    grad: &[f64],
    kind: &IntegratorKind,
    states: &mut OptimizerStates,
    id: ParamId,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::invalid(format!(
            "{id}: parameter length {} vs gradient length {}",
            param.len(),
            grad.len()
        )));
    }
    let shape = (param.len(), 1);
    integrate_slice(param, grad, shape, kind, states, id)
}

fn integrate_slice(
    param: &mut [f64],
    grad: &[f64],
    shape: (usize, usize),
    kind: &IntegratorKind,
    states: &mut OptimizerStates,
    id: ParamId,
) -> Result<()> {
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            id: id.to_string(),
            message: format!("gradient entry {bad} is {}", grad[bad]),
        });
    }
    match *kind {
        IntegratorKind::Euler { lr } => {
            for (p, g) in param.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        IntegratorKind::Adam { lr, beta1, beta2, eps } => {
            let state = states
                .states
                .entry(id)
                .and_modify(|s| {
                    if s.shape != shape {
                        *s = AdamState::fresh(shape);
                    }
                })
                .or_insert_with(|| AdamState::fresh(shape));
            state.t += 1;
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            for ((p, &g), (m, v)) in param
                .iter_mut()
                .zip(grad)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
