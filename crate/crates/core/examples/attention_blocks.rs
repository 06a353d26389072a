//! Parameter budgets of the four attention modes and the behavior of the
//! attention blocks on a feature map.
//!
//! cargo run --example attention_blocks

use hyperei::diffcore::{Tape, Tensor};
use hyperei::model::{build_model, channel_attention, forward, spatial_attention, AttentionMode, ModelConfig};

fn main() -> hyperei::Result<()> {
    for mode in AttentionMode::ALL {
        let cfg = ModelConfig {
            attention_mode: mode,
            ..ModelConfig::new(8)
        };
        let params = build_model(&cfg)?;
        let attention: usize = params
            .names()
            .iter()
            .zip(params.tensors())
            .filter(|(n, _)| n.starts_with("att"))
            .map(|(_, t)| t.numel())
            .sum();
        println!(
            "{mode:>8}: {:>7} parameters ({attention} in attention blocks)",
            params.parameter_count()
        );
    }

    // Zero bottleneck output weights make every channel gate sigmoid(0) = 0.5.
    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..4 * 64).map(|i| (i as f64 * 0.37).sin()).collect();
    let f = tape.constant(Tensor::new(vec![1, 4, 8, 8], data)?);
    let w1 = tape.constant(Tensor::filled(&[2, 4], 0.5));
    let b1 = tape.constant(Tensor::zeros(&[2]));
    let w2 = tape.constant(Tensor::zeros(&[4, 2]));
    let b2 = tape.constant(Tensor::zeros(&[4]));
    let spectral = channel_attention(&mut tape, f, w1, b1, w2, b2)?;
    let sw = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    let sb = tape.constant(Tensor::zeros(&[1]));
    let both = spatial_attention(&mut tape, spectral, sw, sb)?;
    let ratio = tape.value(both).data()[5] / tape.value(f).data()[5];
    println!("zero-weight spatio-spectral block scales features by {ratio}");

    let params = build_model(&ModelConfig::new(8))?;
    let ramp = (0..8 * 32 * 32).map(|i| 0.5 + 0.4 * (i as f32 * 0.013).sin()).collect();
    let input = Tensor::new(vec![1, 8, 32, 32], ramp)?;
    let out = forward(&params, &input)?;
    let (lo, hi) = out
        .data()
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("forward {:?} -> {:?}, outputs in [{lo:.4}, {hi:.4}]", input.shape(), out.shape());
    Ok(())
}
