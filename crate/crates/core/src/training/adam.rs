use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

impl AdamState {
    /// Moments as named tensors for a checkpoint.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor<f32>> {
        let m = self
            .m
            .iter()
            .map(|(k, t)| (format!("{M_PREFIX}{k}"), t.clone()));
        let v = self
            .v
            .iter()
            .map(|(k, t)| (format!("{V_PREFIX}{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn from_tensors(step: u64, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let mut state = AdamState {
            step,
            ..Default::default()
        };
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix(M_PREFIX) {
                state.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                state.v.insert(k.to_string(), t.clone());
            }
        }
        if state.m.len() != state.v.len() || state.m.keys().ne(state.v.keys()) {
            return Err(Error::Config("optimizer moments are incomplete".into()));
        }
        Ok(state)
    }

    /// One bias-corrected Adam update of every parameter that has a gradient.
    pub fn update(
        &mut self,
        params: &mut ParameterStore,
        grads: &BTreeMap<String, Tensor<f32>>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = cfg.betas;
        let step_size = cfg.learning_rate / (1.0 - b1.powi(t));
        let bc2_sqrt = (1.0 - b2.powi(t)).sqrt();
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            if p.shape() != g.shape() || m.shape() != g.shape() || v.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "optimizer state for {name} has the wrong shape"
                )));
            }
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi as f64;
                let mi = b1 * md[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let denom = (vi.sqrt() / bc2_sqrt) + cfg.eps;
                pd[i] = (pd[i] as f64 - step_size * mi / denom) as f32;
            }
        }
        Ok(())
    }
}
