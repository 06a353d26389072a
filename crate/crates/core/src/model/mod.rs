//! Spatio-spectral attention U-Net.
//!
//! Layout for `depth = D`, `ch_i = base · 2^i`:
//!
//! ```text
//! encoder i:  conv3x3(s1) → norm → leaky ─┬─► attention_i ──────────┐ (skip)
//!                                         └► conv3x3(s2) → norm → leaky
//! decoder i:  upsample2(cur) ⧺ attention_i(skip_i) → conv3x3 → norm → leaky
//! head:       conv1x1 → sigmoid
//! ```
//!
//! Every 3×3 convolution uses reflection padding; the stride-2 ones pad one
//! row/column on the top/left only so output sizes halve exactly. `norm` is a
//! per-channel standardization with learned scale and shift, so the 3×3
//! convolutions carry no bias of their own. The attention blocks replace the
//! identity map on each skip path.

mod checkpoint;
mod net;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use net::{
    channel_attention, forward, forward_on_tape, full_model_gradcheck, predict, spatial_attention,
    spatio_spectral_block, BoundParams, LEAKY_SLOPE, MODEL_FD_STEP, MODEL_TOLERANCE, NORM_EPS,
};
pub(crate) use net::cube_tensor;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

/// Which attention blocks sit on the skip paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    None,
    Spatial,
    Spectral,
    Both,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::None,
        AttentionMode::Spatial,
        AttentionMode::Spectral,
        AttentionMode::Both,
    ];

    pub fn has_spatial(self) -> bool {
        matches!(self, AttentionMode::Spatial | AttentionMode::Both)
    }

    pub fn has_spectral(self) -> bool {
        matches!(self, AttentionMode::Spectral | AttentionMode::Both)
    }

    pub fn code(self) -> u32 {
        match self {
            AttentionMode::None => 0,
            AttentionMode::Spatial => 1,
            AttentionMode::Spectral => 2,
            AttentionMode::Both => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::Spatial => "spatial",
            AttentionMode::Spectral => "spectral",
            AttentionMode::Both => "both",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "spatial" => Ok(AttentionMode::Spatial),
            "spectral" => Ok(AttentionMode::Spectral),
            "both" => Ok(AttentionMode::Both),
            other => Err(Error::Config(format!(
                "unknown attention mode {other:?} (expected none|spatial|spectral|both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub in_bands: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Bottleneck width `K` of the channel-attention memory unit.
    pub attention_rank: usize,
    pub attention_mode: AttentionMode,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(in_bands: usize) -> Self {
        Self {
            in_bands,
            base_channels: 32,
            depth: 3,
            attention_rank: 4,
            attention_mode: AttentionMode::Both,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 || self.base_channels == 0 || self.attention_rank == 0 {
            return Err(Error::Config(
                "in_bands, base_channels and attention_rank must be positive".into(),
            ));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.depth > 16 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.attention_mode.has_spectral() && self.attention_rank > self.base_channels {
            return Err(Error::Config(format!(
                "attention rank {} exceeds the {} channels of the first attention site",
                self.attention_rank, self.base_channels
            )));
        }
        Ok(())
    }

    /// Channels of encoder stage `i`.
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Checks that an `height × width` input fits the architecture.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let factor = 1usize << self.depth;
        for (name, size) in [("height", height), ("width", width)] {
            if size % factor != 0 {
                let padded = size.div_ceil(factor) * factor;
                return Err(Error::Shape(format!(
                    "{name} {size} is not divisible by 2^depth = {factor}; pad the cube to {padded} \
                     (add {} pixels)",
                    padded - size
                )));
            }
        }
        if self.attention_mode.has_spatial() {
            let smallest = height.min(width) >> (self.depth - 1);
            if smallest < 7 {
                return Err(Error::Shape(format!(
                    "spatial attention needs skip features of at least 7x7, the deepest is \
                     {}x{}",
                    height >> (self.depth - 1),
                    width >> (self.depth - 1)
                )));
            }
        }
        Ok(())
    }

    /// Canonical parameter list: `(name, shape)` in construction order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<(String, Vec<usize>)>, name: String, cout: usize, cin: usize, k: usize| {
            specs.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            specs.push((format!("{name}.bias"), vec![cout]));
        };
        let normed = |specs: &mut Vec<(String, Vec<usize>)>, name: String, cout: usize, cin: usize| {
            specs.push((format!("{name}.weight"), vec![cout, cin, 3, 3]));
            specs.push((format!("{name}.norm.gamma"), vec![cout]));
            specs.push((format!("{name}.norm.beta"), vec![cout]));
        };
        let mut cin = self.in_bands;
        for i in 0..self.depth {
            let ch = self.channels(i);
            normed(&mut specs, format!("enc{i}.conv"), ch, cin);
            normed(&mut specs, format!("enc{i}.down"), ch, ch);
            cin = ch;
        }
        for i in 0..self.depth {
            let ch = self.channels(i);
            if self.attention_mode.has_spectral() {
                let k = self.attention_rank;
                specs.push((format!("att{i}.spectral.w1"), vec![k, ch]));
                specs.push((format!("att{i}.spectral.b1"), vec![k]));
                specs.push((format!("att{i}.spectral.w2"), vec![ch, k]));
                specs.push((format!("att{i}.spectral.b2"), vec![ch]));
            }
            if self.attention_mode.has_spatial() {
                conv(&mut specs, format!("att{i}.spatial"), 1, 2, 7);
            }
        }
        for i in (0..self.depth).rev() {
            let below = if i + 1 == self.depth { self.channels(i) } else { self.channels(i + 1) };
            normed(&mut specs, format!("dec{i}.conv"), self.channels(i), below + self.channels(i));
        }
        conv(&mut specs, "head".into(), self.in_bands, self.base_channels, 1);
        specs
    }
}

/// Named parameter tensors of one model, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub(crate) fn from_parts(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let specs = config.param_specs();
        if specs.len() != tensors.len()
            || specs.iter().zip(&tensors).any(|((_, s), t)| s.as_slice() != t.shape())
        {
            return Err(Error::Shape("parameter tensors do not match the configuration".into()));
        }
        Ok(Self {
            config,
            names: specs.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Initializes every parameter from `config.seed`: weights uniform in
/// `±sqrt(6 / fan_in)`, biases and shifts zero, scales one.
pub fn build_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = config
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            let numel = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0f32; numel]
            } else if [".bias", ".b1", ".b2", ".beta"].iter().any(|s| name.ends_with(s)) {
                vec![0.0f32; numel]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..numel).map(|_| rng.random_range(-bound..bound) as f32).collect()
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_parts(config.clone(), tensors)
}
