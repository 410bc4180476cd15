//! Residual convolutional feature extractor producing spatial feature maps.
//!
//! Each block is `convs_per_block` same-padded convolutions, each followed by per-batch
//! channel normalization with a learned affine, leaky rectifiers between them, an
//! identity shortcut (1×1 projection + normalization when the width changes) and a
//! 2×2 max-pool. There is no global pooling: the output is an `N×d×h×w` map.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const TEMPERATURE: &str = "temperature";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub filters: usize,
    pub convs_per_block: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub blocks: Vec<BlockConfig>,
    /// Divide outputs by √d.
    pub rescale: bool,
}

impl BackboneConfig {
    /// The 4-block ResNet-12 layout: 64/160/320/640 filters, three 3×3 convs per block,
    /// 84×84 RGB input, 5×5×640 output.
    pub fn resnet12() -> Self {
        Self::uniform(3, 84, &[64, 160, 320, 640], 3, 3)
    }

    /// Two blocks of 8 and 16 filters on 16×16 grayscale input, giving 4×4×16 maps.
    pub fn toy() -> Self {
        Self::uniform(1, 16, &[8, 16], 2, 3)
    }

    /// The toy layout with 1×1 kernels. Every layer then commutes with quarter-turn
    /// rotations, which makes the two-branch alignment exactly testable.
    pub fn equivariant_toy() -> Self {
        Self::uniform(1, 16, &[8, 16], 2, 1)
    }

    pub fn uniform(in_channels: usize, input_size: usize, filters: &[usize], convs: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            input_size,
            blocks: filters
                .iter()
                .map(|&f| BlockConfig { filters: f, convs_per_block: convs, kernel })
                .collect(),
            rescale: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("in_channels and input_size must be positive".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.filters == 0 || b.convs_per_block == 0 {
                return Err(Error::Config(format!("block {i}: filters and convs_per_block must be positive")));
            }
            if b.kernel % 2 == 0 {
                return Err(Error::Config(format!("block {i}: kernel {} must be odd", b.kernel)));
            }
        }
        if self.output_side() == 0 {
            return Err(Error::Config(format!(
                "input size {} is too small for {} pooling stages",
                self.input_size,
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// Spatial side of the output map: the input side halved (rounding down) once per block.
    pub fn output_side(&self) -> usize {
        self.blocks.iter().fold(self.input_size, |s, _| s / 2)
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.filters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    NormScale,
    NormShift,
    Temperature,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    /// Whether weight decay applies to parameters of this kind.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::HeadWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// An ordered, named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a differentiable leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound { vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(), index: self.index.clone() }
    }

    /// Register every parameter as a constant of `g` (no gradients recorded).
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound { vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(), index: self.index.clone() }
    }

    /// Order-sensitive FNV-1a hash over names and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Parameters registered on one graph, addressable by name or position.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
    index: HashMap<String, usize>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, name: &str) -> Var<'g> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }
}

/// A feature extractor plus the learnable temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fan-in scaled normal initialization (std √(2/fan_in)), unit normalization scales,
    /// zero shifts and a temperature of 1. Deterministic in `seed`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let conv = |rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize| {
            let fan_in = (inp * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let data = (0..out * inp * k * k).map(|_| normal.sample(rng)).collect();
            Tensor::from_parts(vec![out, inp, k, k], data)
        };
        let mut c_in = config.in_channels;
        for (b, block) in config.blocks.iter().enumerate() {
            let c_out = block.filters;
            for i in 0..block.convs_per_block {
                let fan = if i == 0 { c_in } else { c_out };
                params.push(format!("block{b}.conv{i}.weight"), ParamKind::ConvWeight, conv(&mut rng, c_out, fan, block.kernel));
                params.push(format!("block{b}.norm{i}.scale"), ParamKind::NormScale, Tensor::full(&[c_out], 1.0));
                params.push(format!("block{b}.norm{i}.shift"), ParamKind::NormShift, Tensor::zeros(&[c_out]));
            }
            if c_in != c_out {
                params.push(format!("block{b}.shortcut.weight"), ParamKind::ConvWeight, conv(&mut rng, c_out, c_in, 1));
                params.push(format!("block{b}.shortcut_norm.scale"), ParamKind::NormScale, Tensor::full(&[c_out], 1.0));
                params.push(format!("block{b}.shortcut_norm.shift"), ParamKind::NormShift, Tensor::zeros(&[c_out]));
            }
            c_in = c_out;
        }
        params.push(TEMPERATURE, ParamKind::Temperature, Tensor::scalar(1.0));
        Ok(Self { config, params })
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(TEMPERATURE).expect("temperature parameter").value.item()
    }

    /// Extract feature maps for a batch `N×c×s×s`; returns `N×d×h×w`.
    pub fn forward<'g>(&self, p: &Bound<'g>, images: Var<'g>) -> Result<Var<'g>> {
        let cfg = &self.config;
        let shape = images.shape();
        let expected = [cfg.in_channels, cfg.input_size, cfg.input_size];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::Shape(format!(
                "backbone expects N×{}×{}×{} images, got {shape:?}",
                expected[0], expected[1], expected[2]
            )));
        }
        let mut x = images;
        let mut c_in = cfg.in_channels;
        for (b, block) in cfg.blocks.iter().enumerate() {
            let mut h = x;
            for i in 0..block.convs_per_block {
                h = h
                    .conv2d(p.var(&format!("block{b}.conv{i}.weight")))
                    .batch_norm()
                    .channel_affine(p.var(&format!("block{b}.norm{i}.scale")), p.var(&format!("block{b}.norm{i}.shift")));
                if i + 1 < block.convs_per_block {
                    h = h.leaky_relu(LEAKY_SLOPE);
                }
            }
            let shortcut = if c_in != block.filters {
                x.conv2d(p.var(&format!("block{b}.shortcut.weight")))
                    .batch_norm()
                    .channel_affine(p.var(&format!("block{b}.shortcut_norm.scale")), p.var(&format!("block{b}.shortcut_norm.shift")))
            } else {
                x
            };
            x = (h + shortcut).leaky_relu(LEAKY_SLOPE).max_pool2();
            c_in = block.filters;
        }
        if cfg.rescale {
            x = x.scale(1.0 / (cfg.feature_dim() as f64).sqrt());
        }
        Ok(x)
    }

    /// Forward pass without recording gradients, returning plain values.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let out = self.forward(&p, g.constant(images.clone()))?;
        let v = out.value();
        Ok((*v).clone())
    }
}
