//! Metrics against straightforward reference formulas.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hyperei::hsio::{make_mask, HsiCube, MaskKind};
use hyperei::metrics::{evaluate, mpsnr, psnr, ssim, Region};

mod common;
use common::{reference_psnr, reference_ssim};

#[test]
fn psnr_and_ssim_match_reference_formulas_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(11..20), rng.random_range(11..20));
        let noise = rng.random_range(0.0..0.3);
        let a: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f32> = a.iter().map(|&v| (v + rng.random_range(-noise..=noise)).clamp(0.0, 1.0)).collect();
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - reference_psnr(&a, &b)).abs() < 1e-6);
        let s = ssim(&a, &b, h, w, 1.0).unwrap();
        let r = reference_ssim(&a, &b, h, w);
        assert!((s - r).abs() < 1e-6, "{s} vs {r}");
    }
}

#[test]
fn identical_inputs_give_exact_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = HsiCube::new(12, 14, 3, (0..12 * 14 * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let r = evaluate(&x, &x, None).unwrap();
    assert_eq!(r.mpsnr, 100.0);
    assert_eq!(r.mssim, 1.0);
    assert!(r.per_band.iter().all(|b| b.psnr == 100.0 && b.ssim == 1.0));
}

#[test]
fn masked_region_psnr_uses_missing_pixels_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = HsiCube::new(12, 12, 2, (0..288).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let mask = make_mask(&MaskKind::Stripe { columns: vec![3..5] }, 12, 12, 0).unwrap();
    // Corrupt only observed pixels: the masked-region PSNR must stay perfect.
    let mut data = x.data().to_vec();
    for (k, v) in data.iter_mut().enumerate() {
        if mask.bits()[k % 144] == 1 {
            *v = 1.0 - *v;
        }
    }
    let y = HsiCube::new(12, 12, 2, data).unwrap();
    assert_eq!(mpsnr(&y, &x, Some(&mask)).unwrap(), 100.0);
    let r = evaluate(&y, &x, Some(&mask)).unwrap();
    assert_eq!(r.region, Region::MaskedOnly);
    assert!(r.ssim_full_frame && r.mssim < 1.0);
    assert!(r.summary_json().contains("masked_only"));
}

proptest! {
    #[test]
    fn psnr_decreases_with_error(base in prop::collection::vec(0.1f32..0.9, 16..64), e1 in 0.001f32..0.05, extra in 0.001f32..0.05) {
        let shifted = |e: f32| base.iter().map(|v| v + e).collect::<Vec<f32>>();
        let p1 = psnr(&base, &shifted(e1), 1.0).unwrap();
        let p2 = psnr(&base, &shifted(e1 + extra), 1.0).unwrap();
        prop_assert!(p2 < p1);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f32> = (0..144).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f32> = (0..144).map(|_| rng.random_range(0.0..1.0)).collect();
        let ab = ssim(&a, &b, 12, 12, 1.0).unwrap();
        let ba = ssim(&b, &a, 12, 12, 1.0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 && ab >= -1.0);
    }
}
