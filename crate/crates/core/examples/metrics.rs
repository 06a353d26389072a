//! Per-band PSNR/SSIM of a noisy cube against its clean version, full-frame
//! and restricted to a masked region.
//!
//! cargo run --example metrics

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperei::hsio::{make_mask, synth_cube, CubeSpec, HsiCube, MaskKind};
use hyperei::metrics::evaluate;

fn main() -> hyperei::Result<()> {
    let clean = synth_cube(&CubeSpec::new(32, 32, 4, 2, 11))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noisy: Vec<f32> = clean
        .data()
        .iter()
        .map(|&v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0))
        .collect();
    let noisy = HsiCube::new(32, 32, 4, noisy)?;

    let full = evaluate(&noisy, &clean, None)?;
    print!("{}", full.to_csv());
    println!("{}", full.summary_json());

    let mask = make_mask(&MaskKind::Rect { top: 10, left: 10, height: 8, width: 8 }, 32, 32, 0)?;
    let masked = evaluate(&noisy, &clean, Some(&mask))?;
    println!("{}", masked.summary_json());

    let same = evaluate(&clean, &clean, None)?;
    println!("identical inputs: {} dB, SSIM {}", same.mpsnr, same.mssim);
    Ok(())
}
