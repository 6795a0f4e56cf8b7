//! SwinUNETR-style encoder-decoder: a shifted-window transformer encoder
//! whose multi-resolution features feed a residual CNN decoder.

pub mod checkpoint;
mod config;
mod decoder;
mod params;
mod swin;
pub mod window;

use std::collections::HashMap;
use std::sync::Arc;

pub use config::ModelConfig;
pub use decoder::decode;
pub use params::{build_model, ParameterStore};
pub use swin::{
    patch_merge, shifted_window_attention, window_attention_weights, AttentionParams, ShiftMask,
};
pub use window::{window_partition, window_reverse, WindowPlan};

use crate::autodiff::{gather, IndexMap, Tape, Var, ZERO_INDEX};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named network weights as differentiable (or constant) values.
pub struct ParamSet<'t, T> {
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t> ParamSet<'t, f32> {
    /// Untracked weights shared with the store (no copy).
    pub fn constants(store: &ParameterStore) -> Self {
        ParamSet {
            vars: store
                .iter()
                .map(|(k, v)| (k.clone(), Var::shared(v.clone())))
                .collect(),
        }
    }
}

impl<'t, T: Scalar> ParamSet<'t, T> {
    pub fn from_tensors<'a>(
        tensors: impl IntoIterator<Item = (&'a String, &'a Arc<Tensor<T>>)>,
    ) -> Self {
        ParamSet {
            vars: tensors
                .into_iter()
                .map(|(k, v)| (k.clone(), Var::shared(v.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a differentiable leaf of `tape`.
    pub fn leaves<'a>(
        tape: &'t Tape<T>,
        tensors: impl IntoIterator<Item = (&'a String, &'a Arc<Tensor<T>>)>,
    ) -> Self {
        ParamSet {
            vars: tensors
                .into_iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<'t, T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<&Var<'t, T>> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }
}

/// Zero-pads (N, C, D, H, W) at the high end of each spatial axis to `padded`.
fn pad_map(shape: &[usize], padded: [usize; 3]) -> IndexMap {
    let (n, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let [pd, ph, pw] = padded;
    let mut idx = Vec::with_capacity(n * c * pd * ph * pw);
    for nc in 0..n * c {
        for z in 0..pd {
            for y in 0..ph {
                for q in 0..pw {
                    idx.push(if z < d && y < h && q < w {
                        (((nc * d + z) * h + y) * w + q) as u32
                    } else {
                        ZERO_INDEX
                    });
                }
            }
        }
    }
    IndexMap::new(idx, vec![n, c, pd, ph, pw], n * c * d * h * w)
}

/// Crops (N, C, D', H', W') back to the leading `target` spatial extent.
fn crop_map(shape: &[usize], target: [usize; 3]) -> IndexMap {
    let (n, c, pd, ph, pw) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let [d, h, w] = target;
    let mut idx = Vec::with_capacity(n * c * d * h * w);
    for nc in 0..n * c {
        for z in 0..d {
            for y in 0..h {
                for q in 0..w {
                    idx.push((((nc * pd + z) * ph + y) * pw + q) as u32);
                }
            }
        }
    }
    IndexMap::new(idx, vec![n, c, d, h, w], n * c * pd * ph * pw)
}

/// Differentiable forward pass. Inputs are (N, in_channels, D, H, W); spatial
/// dims that are not multiples of [`ModelConfig::spatial_multiple`] are
/// zero-padded at the high end and the output is cropped back.
pub fn forward_graph<'t, T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<'t, T>,
    x: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let shape = x.shape().to_vec();
    if shape.len() != 5 {
        return Err(Error::Shape(format!(
            "expected (N, C, D, H, W) input, got {shape:?}"
        )));
    }
    if shape[1] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, model expects {}",
            shape[1], cfg.in_channels
        )));
    }
    if shape.iter().any(|&v| v == 0) {
        return Err(Error::Shape(format!("empty input {shape:?}")));
    }
    let m = cfg.spatial_multiple();
    let spatial = [shape[2], shape[3], shape[4]];
    let padded = spatial.map(|v| v.div_ceil(m) * m);
    let x = if padded == spatial {
        x.clone()
    } else {
        gather(x, &pad_map(&shape, padded))?
    };
    let hidden = swin::encode(cfg, params, &x)?;
    let out = decode(cfg, params, &x, &hidden)?;
    if padded == spatial {
        Ok(out)
    } else {
        gather(&out, &crop_map(out.shape(), spatial))
    }
}

/// Inference forward pass in 32-bit precision.
pub fn forward(store: &ParameterStore, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let params = ParamSet::constants(store);
    let out = forward_graph(store.config(), &params, &Var::constant(x.clone()))?;
    Ok(out.into_value())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_size: 8,
            depths: vec![1, 1],
            num_heads: vec![2, 4],
            window: 2,
            ..ModelConfig::default()
        }
    }

    fn input(shape: &[usize], seed: u32) -> Tensor<f32> {
        Tensor::from_fn(shape, |i| ((i as f32 + seed as f32) * 0.7131).sin())
    }

    #[test]
    fn output_matches_input_spatial_shape() {
        let store = build_model(&tiny_config(), 3).unwrap();
        let y = forward(&store, &input(&[2, 3, 8, 8, 8], 0)).unwrap();
        assert_eq!(y.shape(), [2, 1, 8, 8, 8]);
        assert!(y.all_finite());
        // Padding rule: 11 x 8 x 5 pads to 16 x 8 x 8 and is cropped back.
        let y = forward(&store, &input(&[1, 3, 11, 8, 5], 1)).unwrap();
        assert_eq!(y.shape(), [1, 1, 11, 8, 5]);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let store = build_model(&tiny_config(), 3).unwrap();
        assert!(matches!(
            forward(&store, &input(&[1, 4, 8, 8, 8], 0)),
            Err(Error::Shape(_))
        ));
        assert!(forward(&store, &input(&[0, 3, 8, 8, 8], 0)).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_batch_equivariant() {
        let store = build_model(&tiny_config(), 5).unwrap();
        let a = input(&[1, 3, 8, 8, 8], 1);
        let b = input(&[1, 3, 8, 8, 8], 2);
        let both = Tensor::stack(&[&a.index_outer(0), &b.index_outer(0)]).unwrap();
        let ya = forward(&store, &a).unwrap();
        let yb = forward(&store, &b).unwrap();
        let yab = forward(&store, &both).unwrap();
        assert_eq!(forward(&store, &a).unwrap(), ya);
        let stacked = Tensor::stack(&[&ya.index_outer(0), &yb.index_outer(0)]).unwrap();
        assert!(yab.max_abs_diff(&stacked) < 1e-5);
    }
}
