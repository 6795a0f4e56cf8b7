use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::volume::Modality;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) redrawn outside two standard deviations.
    TruncNormal(f64),
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct LayoutBuilder(Vec<ParamSpec>);

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, prefix: &str, inputs: usize, outputs: usize, bias: bool) {
        self.push(
            format!("{prefix}.weight"),
            vec![outputs, inputs],
            Init::TruncNormal(0.02),
        );
        if bias {
            self.push(format!("{prefix}.bias"), vec![outputs], Init::Zeros);
        }
    }

    fn layer_norm(&mut self, prefix: &str, channels: usize) {
        self.push(format!("{prefix}.weight"), vec![channels], Init::Ones);
        self.push(format!("{prefix}.bias"), vec![channels], Init::Zeros);
    }

    fn conv(&mut self, name: &str, inputs: usize, outputs: usize, k: usize) {
        self.push(
            name.to_string(),
            vec![outputs, inputs, k, k, k],
            Init::FanIn(inputs * k * k * k),
        );
    }

    fn res_block(&mut self, prefix: &str, inputs: usize, outputs: usize) {
        self.conv(&format!("{prefix}.conv1.weight"), inputs, outputs, 3);
        self.conv(&format!("{prefix}.conv2.weight"), outputs, outputs, 3);
        if inputs != outputs {
            self.conv(&format!("{prefix}.conv3.weight"), inputs, outputs, 1);
        }
    }
}

/// Every parameter of the architecture described by `cfg`, in a fixed order.
pub(crate) fn parameter_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut b = LayoutBuilder(Vec::new());
    let f = cfg.feature_size;
    let p = cfg.embed_patch;
    b.push(
        "encoder.patch_embed.weight".into(),
        vec![f, cfg.in_channels, p, p, p],
        Init::FanIn(cfg.in_channels * p * p * p),
    );
    b.push(
        "encoder.patch_embed.bias".into(),
        vec![f],
        Init::FanIn(cfg.in_channels * p * p * p),
    );
    let table_rows = (2 * cfg.window - 1).pow(3);
    for (s, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.num_heads).enumerate() {
        let c = cfg.stage_channels(s);
        for blk in 0..depth {
            let pre = format!("encoder.stages.{s}.blocks.{blk}");
            b.layer_norm(&format!("{pre}.norm1"), c);
            b.linear(&format!("{pre}.attn.qkv"), c, 3 * c, true);
            b.push(
                format!("{pre}.attn.relative_position_bias_table"),
                vec![table_rows, heads],
                Init::TruncNormal(0.02),
            );
            b.linear(&format!("{pre}.attn.proj"), c, c, true);
            b.layer_norm(&format!("{pre}.norm2"), c);
            b.linear(&format!("{pre}.mlp.fc1"), c, cfg.mlp_hidden(s), true);
            b.linear(&format!("{pre}.mlp.fc2"), cfg.mlp_hidden(s), c, true);
        }
        b.layer_norm(&format!("encoder.stages.{s}.merge.norm"), 8 * c);
        b.linear(
            &format!("encoder.stages.{s}.merge.reduction"),
            8 * c,
            2 * c,
            false,
        );
    }

    let stages = cfg.num_stages();
    b.res_block("decoder.input_block", cfg.in_channels, f);
    for i in 0..stages.saturating_sub(1) {
        let c = cfg.stage_channels(i);
        b.res_block(&format!("decoder.skip_blocks.{i}"), c, c);
    }
    let deepest = cfg.stage_channels(stages);
    b.res_block("decoder.bottleneck", deepest, deepest);
    for level in (0..=stages).rev() {
        let (inputs, outputs) = if level == 0 {
            (f, f)
        } else {
            (cfg.stage_channels(level), cfg.stage_channels(level - 1))
        };
        let pre = format!("decoder.up_blocks.{level}");
        b.push(
            format!("{pre}.transp.weight"),
            vec![inputs, outputs, 2, 2, 2],
            Init::FanIn(outputs * 8),
        );
        b.res_block(&format!("{pre}.res"), 2 * outputs, outputs);
    }
    b.conv("head.weight", f, cfg.out_channels, 1);
    b.push("head.bias".into(), vec![cfg.out_channels], Init::FanIn(f));
    b.0
}

fn initialize(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n: usize = spec.shape.iter().product();
    let data: Vec<f32> = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::TruncNormal(std) => {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v as f32;
                    }
                })
                .collect()
        }
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n)
                .map(|_| rng.gen_range(-bound..bound) as f32)
                .collect()
        }
    };
    Tensor::new(spec.shape.clone(), data).expect("layout shape")
}

/// Named weights of one network together with the configuration that
/// determines their shapes.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    config: ModelConfig,
    scenario: Option<Modality>,
    tensors: BTreeMap<String, Arc<Tensor<f32>>>,
}

/// Builds a freshly initialized network. Initialization is a pure function of
/// `(cfg, seed)`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = parameter_layout(cfg)
        .iter()
        .map(|spec| (spec.name.clone(), Arc::new(initialize(spec, &mut rng))))
        .collect();
    Ok(ParameterStore {
        config: cfg.clone(),
        scenario: None,
        tensors,
    })
}

impl ParameterStore {
    /// Assembles a store from loaded tensors, checking names and shapes
    /// against the architecture of `config`.
    pub fn from_tensors(
        config: ModelConfig,
        scenario: Option<Modality>,
        mut tensors: BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut out = BTreeMap::new();
        for spec in parameter_layout(&config) {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::MissingParameter(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, architecture expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            out.insert(spec.name, Arc::new(t));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Shape(format!("unexpected parameter {extra}")));
        }
        Ok(ParameterStore {
            config,
            scenario,
            tensors: out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Target modality this network synthesizes, when trained for one.
    pub fn scenario(&self) -> Option<Modality> {
        self.scenario
    }

    pub fn set_scenario(&mut self, scenario: Option<Modality>) {
        self.scenario = scenario;
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor<f32>>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor<f32>>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Replaces a tensor of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: {:?} vs {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    /// All tensors converted to another precision.
    pub fn to_precision<T: Scalar>(&self) -> BTreeMap<String, Arc<Tensor<T>>> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(v.cast::<T>())))
            .collect()
    }

    /// Bitwise equality of all tensors and the configuration.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.shape() == b.shape()
                        && a.data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let layout = parameter_layout(&ModelConfig::default());
        let mut names: Vec<_> = layout.iter().map(|s| &s.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::desk();
        let a = build_model(&cfg, 7).unwrap();
        let b = build_model(&cfg, 7).unwrap();
        let c = build_model(&cfg, 8).unwrap();
        assert!(a.bit_identical(&b));
        assert!(!a.bit_identical(&c));
        assert_eq!(a.num_parameters(), c.num_parameters());
    }

    #[test]
    fn truncated_normal_stays_in_bounds() {
        let store = build_model(&ModelConfig::desk(), 1).unwrap();
        let table = store
            .get("encoder.stages.0.blocks.0.attn.relative_position_bias_table")
            .unwrap();
        assert_eq!(table.shape(), [343, 3]);
        assert!(table.data().iter().all(|v| v.abs() <= 0.04 + 1e-7));
    }

    #[test]
    fn from_tensors_rejects_shape_drift() {
        let cfg = ModelConfig {
            feature_size: 8,
            depths: vec![1, 1],
            num_heads: vec![2, 4],
            window: 2,
            ..ModelConfig::default()
        };
        let store = build_model(&cfg, 0).unwrap();
        let mut tensors: BTreeMap<String, Tensor<f32>> = store
            .iter()
            .map(|(k, v)| (k.clone(), (**v).clone()))
            .collect();
        assert!(ParameterStore::from_tensors(cfg.clone(), None, tensors.clone()).is_ok());
        tensors.insert("head.bias".into(), Tensor::zeros(&[2]));
        assert!(ParameterStore::from_tensors(cfg.clone(), None, tensors.clone()).is_err());
        tensors.remove("head.bias");
        assert!(matches!(
            ParameterStore::from_tensors(cfg, None, tensors),
            Err(Error::MissingParameter(_))
        ));
    }
}
