//! Inpaint a 4-column stripe of a synthetic cube, with and without the
//! equivariance term.
//!
//! cargo run --release --example inpaint -- [ITERATIONS]

use hyperei::hsio::{make_mask, synth_cube, CubeSpec, MaskKind};
use hyperei::metrics::mpsnr;
use hyperei::model::ModelConfig;
use hyperei::operators::apply_mask;
use hyperei::trainer::{train_with_progress, TrainConfig};

fn main() -> hyperei::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let x = synth_cube(&CubeSpec::new(32, 32, 8, 3, 7))?;
    let mask = make_mask(&MaskKind::Stripe { columns: vec![14..18] }, 32, 32, 0)?;
    let y = apply_mask(&x, &mask)?;
    println!("masked-region MPSNR of the measurement: {:.2} dB", mpsnr(&y, &x, Some(&mask))?);

    for (label, alpha) in [("equivariant", 1.0), ("mc only", 0.0)] {
        let train = TrainConfig {
            alpha,
            iterations,
            seed: 1,
            log_every: 100,
            ..TrainConfig::default()
        };
        let model = ModelConfig {
            seed: 1,
            ..ModelConfig::new(8)
        };
        let out = train_with_progress(&y, &mask, &model, &train, Some(&x), |r| {
            println!(
                "  [{label}] iter {:>5}  mc {:.2e}  ei {:.2e}  full-frame MPSNR {:.2} dB",
                r.iteration,
                r.mc_loss,
                r.ei_loss,
                r.mpsnr.unwrap_or(f64::NAN)
            )
        })?;
        println!(
            "{label}: masked-region MPSNR {:.2} dB after {iterations} iterations",
            mpsnr(&out.x_hat, &x, Some(&mask))?
        );
    }
    Ok(())
}
