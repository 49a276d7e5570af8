use std::collections::BTreeMap;

use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    XavierUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Intra,
    Inter,
}

impl Pass {
    pub fn as_str(self) -> &'static str {
        match self {
            Pass::Intra => "intra",
            Pass::Inter => "inter",
        }
    }
}

pub fn layer_prefix(block: usize, pass: Pass, layer: usize) -> String {
    format!("block{block}.{}.layer{layer}", pass.as_str())
}

pub fn pass_norm_prefix(block: usize, pass: Pass) -> String {
    format!("block{block}.{}.norm", pass.as_str())
}

pub const ENCODER: &str = "encoder.weight";
pub const DECODER: &str = "decoder.weight";
pub const CUE_CONTEXT: &str = "cue.context.weight";
pub const CUE_SPEAKER: &str = "cue.speaker.weight";
pub const TARGET_WEIGHT: &str = "target.weight";
pub const TARGET_BIAS: &str = "target.bias";

pub fn mask_weight(stream: usize) -> String {
    format!("mask{stream}.weight")
}

pub fn mask_bias(stream: usize) -> String {
    format!("mask{stream}.bias")
}

/// Every tensor the configuration needs, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let k = cfg.encoder_kernel;
    let ff = cfg.ff_dim();
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    let xavier = |fan_in, fan_out| Init::XavierUniform { fan_in, fan_out };

    push(ENCODER.into(), vec![k, d], xavier(k, d));
    push(DECODER.into(), vec![d, k], xavier(d, k));
    for b in 0..cfg.num_blocks {
        for pass in [Pass::Intra, Pass::Inter] {
            for l in 0..cfg.layers_per_pass {
                let p = layer_prefix(b, pass, l);
                push(format!("{p}.ln1.weight"), vec![d], Init::Ones);
                push(format!("{p}.ln1.bias"), vec![d], Init::Zeros);
                push(format!("{p}.attn.qkv.weight"), vec![d, 3 * d], xavier(d, d));
                push(format!("{p}.attn.qkv.bias"), vec![3 * d], Init::Zeros);
                push(format!("{p}.attn.out.weight"), vec![d, d], xavier(d, d));
                push(format!("{p}.attn.out.bias"), vec![d], Init::Zeros);
                push(format!("{p}.ln2.weight"), vec![d], Init::Ones);
                push(format!("{p}.ln2.bias"), vec![d], Init::Zeros);
                push(format!("{p}.ff.in.weight"), vec![d, ff], xavier(d, ff));
                push(format!("{p}.ff.in.bias"), vec![ff], Init::Zeros);
                push(format!("{p}.ff.out.weight"), vec![ff, d], xavier(ff, d));
                push(format!("{p}.ff.out.bias"), vec![d], Init::Zeros);
            }
            let p = pass_norm_prefix(b, pass);
            push(format!("{p}.weight"), vec![d], Init::Ones);
            push(format!("{p}.bias"), vec![d], Init::Zeros);
        }
    }
    if cfg.variant.uses_context() {
        push(CUE_CONTEXT.into(), vec![cfg.context_dim, d], xavier(cfg.context_dim, d));
    }
    if cfg.variant.uses_speaker() {
        push(CUE_SPEAKER.into(), vec![cfg.speaker_dim, d], xavier(cfg.speaker_dim, d));
    }
    for s in 0..cfg.output_streams() {
        push(mask_weight(s), vec![d, d], xavier(d, d));
        push(mask_bias(s), vec![d], Init::Zeros);
    }
    if cfg.variant == super::Variant::ContSep {
        push(TARGET_WEIGHT.into(), vec![d, cfg.num_streams], xavier(d, cfg.num_streams));
        push(TARGET_BIAS.into(), vec![cfg.num_streams], Init::Zeros);
    }
    specs
}

/// Named tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Outcome of initializing from another checkpoint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WarmStart {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
}

impl<T: Scalar> Default for Parameters<T> {
    fn default() -> Self {
        Parameters {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Parameters<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::XavierUniform { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect()
                }
            };
            tensors.insert(spec.name, Tensor::from_vec(&spec.shape, data));
        }
        Parameters { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Every expected tensor is present with the right shape and finite values,
    /// and nothing else is.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        let mut problems = Vec::new();
        for spec in &specs {
            match self.tensors.get(&spec.name) {
                None => problems.push(format!("missing {}", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => problems.push(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )),
                Some(t) if !t.all_finite() => problems.push(format!("{}: non-finite values", spec.name)),
                Some(_) => {}
            }
        }
        for name in self.tensors.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(problems.join("; ")))
        }
    }

    /// Copies every tensor of `source` whose name exists here. Shape conflicts
    /// abort without modifying `self`; tensors absent from `source` keep their
    /// fresh initialization.
    pub fn warm_start_from(&mut self, source: &Parameters<T>) -> Result<WarmStart> {
        let conflicts: Vec<String> = self
            .tensors
            .iter()
            .filter_map(|(name, t)| {
                source
                    .tensors
                    .get(name)
                    .filter(|s| s.shape() != t.shape())
                    .map(|s| format!("{name} ({:?} vs {:?})", s.shape(), t.shape()))
            })
            .collect();
        if !conflicts.is_empty() {
            return Err(Error::Checkpoint(format!(
                "shape conflicts while loading: {}",
                conflicts.join(", ")
            )));
        }
        let mut report = WarmStart::default();
        for (name, t) in self.tensors.iter_mut() {
            match source.tensors.get(name) {
                Some(s) => {
                    *t = s.clone();
                    report.loaded.push(name.clone());
                }
                None => report.fresh.push(name.clone()),
            }
        }
        Ok(report)
    }
}
