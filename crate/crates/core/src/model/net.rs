use std::collections::HashMap;

use super::{AttentionMode, ModelConfig, ModelParams};
use crate::diffcore::gradcheck::{max_relative_error, Coords, GradcheckRow};
use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hsio::HsiCube;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;
/// Step used for whole-network finite differences. Smaller than the per-op
/// step so that perturbations rarely push an activation across a kink.
pub const MODEL_FD_STEP: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Records every tensor of `params` as a leaf of `tape`.
    pub fn bind<T: Real>(params: &ModelParams<T>, tape: &mut Tape<T>, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        let index = params
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self { vars, index }
    }

    pub(crate) fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            vars: vars.to_vec(),
            index: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("model has no parameter {name:?}")))
    }

    /// Gradients of every parameter after a backward pass, in canonical order.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Result<Vec<Vec<T>>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .ok_or_else(|| Error::Backward("parameter has no gradient; run backward first".into()))
            })
            .collect()
    }
}

/// Reflection-padded 3×3 convolution, normalization, leaky ReLU.
fn conv_block<T: Real>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let pads = if stride == 1 { [1, 1, 1, 1] } else { [1, 0, 1, 0] };
    let padded = tape.reflect_pad(x, pads)?;
    let w = p.get(&format!("{name}.weight"))?;
    let zero = tape.constant(Tensor::zeros(&[tape.shape(w)[0]]));
    let y = tape.conv2d(padded, w, zero, stride, 0)?;
    let gamma = p.get(&format!("{name}.norm.gamma"))?;
    let beta = p.get(&format!("{name}.norm.beta"))?;
    let y = tape.batch_norm(y, gamma, beta, T::lit(NORM_EPS))?;
    Ok(tape.leaky_relu(y, T::lit(LEAKY_SLOPE)))
}

/// `s = sigmoid(W₂ · relu(W₁ · gap(f) + b₁) + b₂)`, output `f` scaled per channel by `s`.
pub fn channel_attention<T: Real>(
    tape: &mut Tape<T>,
    feature: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let (n, c) = match *tape.shape(feature) {
        [n, c, _, _] => (n, c),
        ref s => return Err(Error::Shape(format!("channel attention expects NCHW, got {s:?}"))),
    };
    let k = tape.shape(w1)[0];
    if k > c {
        return Err(Error::Shape(format!("attention rank {k} exceeds {c} channels")));
    }
    let squeezed = tape.global_avg_pool(feature)?;
    let flat = tape.reshape(squeezed, &[n, c])?;
    let hidden = tape.linear(flat, w1, b1)?;
    let hidden = tape.relu(hidden);
    let logits = tape.linear(hidden, w2, b2)?;
    let gate = tape.sigmoid(logits);
    let gate = tape.reshape(gate, &[n, c, 1, 1])?;
    tape.mul(feature, gate)
}

/// `a = sigmoid(conv7x7([mean_c(f), max_c(f)]))`, output `f` scaled per pixel by `a`.
pub fn spatial_attention<T: Real>(tape: &mut Tape<T>, feature: Var, weight: Var, bias: Var) -> Result<Var> {
    let (h, w) = match *tape.shape(feature) {
        [_, _, h, w] => (h, w),
        ref s => return Err(Error::Shape(format!("spatial attention expects NCHW, got {s:?}"))),
    };
    if h < 7 || w < 7 {
        return Err(Error::Shape(format!("spatial attention needs at least 7x7, got {h}x{w}")));
    }
    let mean = tape.channel_mean(feature)?;
    let max = tape.channel_max(feature)?;
    let pooled = tape.concat_channels(mean, max)?;
    let padded = tape.reflect_pad(pooled, [3, 3, 3, 3])?;
    let logits = tape.conv2d(padded, weight, bias, 1, 0)?;
    let map = tape.sigmoid(logits);
    tape.mul(feature, map)
}

/// Attention block at skip site `site`: identity, spectral, spatial, or
/// spatial after spectral.
pub fn spatio_spectral_block<T: Real>(
    tape: &mut Tape<T>,
    feature: Var,
    params: &BoundParams,
    site: usize,
    mode: AttentionMode,
) -> Result<Var> {
    let mut out = feature;
    if mode.has_spectral() {
        let g = |s: &str| params.get(&format!("att{site}.spectral.{s}"));
        out = channel_attention(tape, out, g("w1")?, g("b1")?, g("w2")?, g("b2")?)?;
    }
    if mode.has_spatial() {
        let w = params.get(&format!("att{site}.spatial.weight"))?;
        let b = params.get(&format!("att{site}.spatial.bias"))?;
        out = spatial_attention(tape, out, w, b)?;
    }
    Ok(out)
}

/// Runs the network on a `[1, C, H, W]` input already on the tape.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &BoundParams,
    config: &ModelConfig,
    input: Var,
) -> Result<Var> {
    let (c, h, w) = match *tape.shape(input) {
        [1, c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("model input must be [1,C,H,W], got {s:?}"))),
    };
    if c != config.in_bands {
        return Err(Error::Shape(format!(
            "model expects {} bands, input has {c}",
            config.in_bands
        )));
    }
    config.check_input(h, w)?;

    let mut skips = Vec::with_capacity(config.depth);
    let mut cur = input;
    for i in 0..config.depth {
        let f = conv_block(tape, params, &format!("enc{i}.conv"), cur, 1)?;
        skips.push(spatio_spectral_block(tape, f, params, i, config.attention_mode)?);
        cur = conv_block(tape, params, &format!("enc{i}.down"), f, 2)?;
    }
    for i in (0..config.depth).rev() {
        let up = tape.upsample2(cur)?;
        let joined = tape.concat_channels(up, skips[i])?;
        cur = conv_block(tape, params, &format!("dec{i}.conv"), joined, 1)?;
    }
    let logits = tape.conv2d(cur, params.get("head.weight")?, params.get("head.bias")?, 1, 0)?;
    Ok(tape.sigmoid(logits))
}

pub(crate) fn cube_tensor<T: Real>(cube: &HsiCube) -> Tensor<T> {
    Tensor::new(
        vec![1, cube.bands(), cube.height(), cube.width()],
        cube.data().iter().map(|&v| T::from_f32(v).unwrap()).collect(),
    )
    .expect("cube dims are positive")
}

/// Inference-only forward pass on a tensor.
pub fn forward<T: Real>(params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(params, &mut tape, false);
    let x = tape.constant(input.clone());
    let y = forward_on_tape(&mut tape, &bound, params.config(), x)?;
    Ok(tape.value(y).clone())
}

/// `f(cube)` as a cube of the same dimensions.
pub fn predict(params: &ModelParams, cube: &HsiCube) -> Result<HsiCube> {
    let out = forward(params, &cube_tensor(cube))?;
    HsiCube::new(cube.height(), cube.width(), cube.bands(), out.into_data())
}

/// Finite-difference check of `mse(f(x), target)` with respect to 50
/// randomly chosen parameters of a small network on an 8×8×4 input.
pub fn full_model_gradcheck(seed: u64) -> Result<GradcheckRow> {
    use rand::{Rng, SeedableRng};
    let config = ModelConfig {
        in_bands: 4,
        base_channels: 4,
        depth: 1,
        attention_rank: 2,
        attention_mode: AttentionMode::Both,
        seed,
    };
    let mut params = super::build_model(&config)?.cast::<f64>();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Move biases, shifts and scales off their constant initial values.
    for (name, t) in params.names.clone().iter().zip(params.tensors_mut()) {
        if [".bias", ".b1", ".b2", ".beta"].iter().any(|s| name.ends_with(s)) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        } else if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    let input: Vec<f64> = (0..4 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let target: Vec<f64> = (0..4 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let input = Tensor::new(vec![1, 4, 8, 8], input)?;
    let target = Tensor::new(vec![1, 4, 8, 8], target)?;
    let names = params.names().to_vec();
    let err = max_relative_error(
        params.tensors(),
        |tape, vars| {
            let bound = BoundParams::from_vars(&names, vars);
            let x = tape.constant(input.clone());
            let y = forward_on_tape(tape, &bound, &config, x)?;
            let t = tape.constant(target.clone());
            tape.mse(y, t)
        },
        MODEL_FD_STEP,
        Coords::Sample { count: 50, seed },
    )?;
    Ok(GradcheckRow::new("full_model", err, MODEL_TOLERANCE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn small(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            in_bands: 3,
            base_channels: 4,
            depth: 2,
            attention_rank: 2,
            attention_mode: mode,
            seed: 11,
        }
    }

    fn ramp_input(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(
            vec![1, c, h, w],
            (0..c * h * w).map(|i| ((i * 7919) % 97) as f32 / 97.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = ModelConfig {
            seed: 1,
            ..ModelConfig::new(8)
        };
        let params = build_model(&cfg).unwrap();
        let x = ramp_input(8, 32, 32);
        let y = forward(&params, &x).unwrap();
        assert_eq!(y.shape(), &[1, 8, 32, 32]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(forward(&params, &x).unwrap(), y);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let params = build_model(&small(AttentionMode::None)).unwrap();
        let err = forward(&params, &ramp_input(3, 14, 16)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_attention_weights_halve_and_quarter() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(ramp_input(4, 8, 8).cast());
        let w1 = tape.constant(Tensor::filled(&[2, 4], 0.3));
        let b1 = tape.constant(Tensor::zeros(&[2]));
        let w2 = tape.constant(Tensor::zeros(&[4, 2]));
        let b2 = tape.constant(Tensor::zeros(&[4]));
        let sw = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
        let sb = tape.constant(Tensor::zeros(&[1]));
        let spectral = channel_attention(&mut tape, f, w1, b1, w2, b2).unwrap();
        let both = spatial_attention(&mut tape, spectral, sw, sb).unwrap();
        let spatial = spatial_attention(&mut tape, f, sw, sb).unwrap();
        let fv = tape.value(f).data().to_vec();
        for (i, &v) in fv.iter().enumerate() {
            assert_eq!(tape.value(spectral).data()[i], 0.5 * v);
            assert_eq!(tape.value(spatial).data()[i], 0.5 * v);
            assert_eq!(tape.value(both).data()[i], 0.25 * v);
        }
    }

    #[test]
    fn mode_none_is_bitwise_identity() {
        let params = build_model(&small(AttentionMode::None)).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&params, &mut tape, false);
        let f = tape.constant(ramp_input(4, 8, 8));
        let out = spatio_spectral_block(&mut tape, f, &bound, 0, AttentionMode::None).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn every_mode_preserves_shape() {
        for mode in AttentionMode::ALL {
            let params = build_model(&ModelConfig {
                depth: 1,
                ..small(mode)
            })
            .unwrap();
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &mut tape, false);
            let f = tape.constant(ramp_input(4, 8, 8));
            let out = spatio_spectral_block(&mut tape, f, &bound, 0, mode).unwrap();
            assert_eq!(tape.shape(out), &[1, 4, 8, 8]);
        }
    }

    #[test]
    fn spatial_attention_requires_seven_pixels() {
        let params = build_model(&small(AttentionMode::Spatial)).unwrap();
        // depth 2 on 8×8 leaves a 4×4 skip at the second site.
        let err = forward(&params, &ramp_input(3, 8, 8)).unwrap_err();
        assert!(err.to_string().contains("7x7"), "{err}");
        assert!(forward(&params, &ramp_input(3, 16, 16)).is_ok());
    }

    /// True when some bottleneck unit of the channel attention at `site` is
    /// active (positive pre-activation) for this input.
    fn bottleneck_active(params: &ModelParams, x: &Tensor<f32>, site: usize) -> bool {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(params, &mut tape, false);
        let mut cur = tape.constant(x.clone());
        let mut feature = cur;
        for i in 0..=site {
            feature = conv_block(&mut tape, &bound, &format!("enc{i}.conv"), cur, 1).unwrap();
            cur = conv_block(&mut tape, &bound, &format!("enc{i}.down"), feature, 2).unwrap();
        }
        let (c, hw) = (tape.shape(feature)[1], tape.shape(feature)[2] * tape.shape(feature)[3]);
        let fv = tape.value(feature).data();
        let gap: Vec<f32> = (0..c).map(|ch| fv[ch * hw..(ch + 1) * hw].iter().sum::<f32>() / hw as f32).collect();
        let w1 = params.get(&format!("att{site}.spectral.w1")).unwrap();
        let b1 = params.get(&format!("att{site}.spectral.b1")).unwrap();
        (0..b1.numel()).any(|k| {
            let pre: f32 = (0..c).map(|ch| w1.data()[k * c + ch] * gap[ch]).sum::<f32>() + b1.data()[k];
            pre > 0.0
        })
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut inactive_sites = 0;
        for seed in 0..6 {
            let cfg = ModelConfig {
                in_bands: 3,
                base_channels: 8,
                depth: 2,
                attention_rank: 4,
                attention_mode: AttentionMode::Both,
                seed,
            };
            let params = build_model(&cfg).unwrap();
            let data = (0..3 * 256).map(|_| rng.random_range(0.0..1.0)).collect();
            let input = Tensor::new(vec![1, 3, 16, 16], data).unwrap();
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&params, &mut tape, true);
            let x = tape.constant(input.clone());
            let y = forward_on_tape(&mut tape, &bound, params.config(), x).unwrap();
            let target = tape.constant(Tensor::filled(&[1, 3, 16, 16], 0.2));
            let loss = tape.mse(y, target).unwrap();
            tape.backward(loss).unwrap();
            let active: Vec<bool> = (0..2).map(|s| bottleneck_active(&params, &input, s)).collect();
            inactive_sites += active.iter().filter(|a| !**a).count();
            for (name, g) in params.names().iter().zip(bound.grads(&tape).unwrap()) {
                let nonzero = g.iter().any(|&v| v != 0.0);
                // A ReLU bottleneck whose units are all inactive has zero
                // hidden output and passes no gradient to w1, b1 or w2.
                let site = name.as_bytes()[3].wrapping_sub(b'0') as usize;
                let expect = if ["spectral.w1", "spectral.b1", "spectral.w2"].iter().any(|s| name.ends_with(s)) {
                    active[site]
                } else {
                    true
                };
                assert_eq!(nonzero, expect, "seed {seed}: {name}");
            }
        }
        assert!(inactive_sites < 12, "every bottleneck inactive");
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let row = full_model_gradcheck(2).unwrap();
        assert!(row.passed, "{row:?}");
    }
}
