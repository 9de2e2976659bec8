use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments, one pair per parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One Adam step over every parameter that has an entry in `grads`.
///
/// The step counter advances once per call, whether or not every parameter
/// received a gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.numel()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.numel()]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
