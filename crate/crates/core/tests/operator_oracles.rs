//! Group laws, matrix identities and null-space coverage against brute-force
//! oracles.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyperei::hsio::{make_mask, HsiCube, MaskKind, SpatialMask};
use hyperei::operators::{
    apply_mask, apply_shift, mask_matrix, nullspace_coverage, sample_group, shift_matrix, virtual_operator,
    GroupAction, GroupConfig,
};

fn cube(h: usize, w: usize, c: usize, seed: u64) -> HsiCube {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HsiCube::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Pixels whose value some stacked operator reads directly. `M ∘ T_g⁻¹`
/// observes `x` at `q + g` for each observed `q`; the identity is included.
fn covered_pixels(mask: &SpatialMask, actions: &[GroupAction]) -> usize {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let mut covered = BTreeSet::new();
    for g in std::iter::once(GroupAction::IDENTITY).chain(actions.iter().copied()) {
        for i in 0..h {
            for j in 0..w {
                if mask.is_observed(i as usize, j as usize) {
                    covered.insert(((i + g.dy).rem_euclid(h), (j + g.dx).rem_euclid(w)));
                }
            }
        }
    }
    covered.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_inverse_identity(dx1 in -9i64..9, dy1 in -9i64..9, dx2 in -9i64..9, dy2 in -9i64..9, seed in 0u64..100) {
        let x = cube(5, 7, 2, seed);
        let (g, h) = (GroupAction::new(dx1, dy1), GroupAction::new(dx2, dy2));
        prop_assert_eq!(apply_shift(&x, g.compose(h)), apply_shift(&apply_shift(&x, h), g));
        prop_assert_eq!(apply_shift(&apply_shift(&x, g), g.inverse()), x.clone());
        prop_assert_eq!(apply_shift(&x, GroupAction::IDENTITY), x);
    }

    #[test]
    fn virtual_operator_identity_is_exact(dx in 0i64..6, dy in 0i64..6, cols in 0usize..5, seed in 0u64..50) {
        let mask = make_mask(&MaskKind::Stripe { columns: vec![cols..cols + 2] }, 6, 7, 0).unwrap();
        let g = GroupAction::new(dx, dy);
        let m = mask_matrix(&mask).unwrap();
        let lhs = virtual_operator(&mask, g, 6, 7).unwrap().matmul(&shift_matrix(g, 6, 7).unwrap()).unwrap();
        prop_assert_eq!(&lhs, &m);
        // M̃ · vec(T_g x) = M · vec(x) on one band.
        let x = cube(6, 7, 1, seed);
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let shifted: Vec<f64> = apply_shift(&x, g).data().iter().map(|&v| v as f64).collect();
        prop_assert_eq!(
            virtual_operator(&mask, g, 6, 7).unwrap().mul_vec(&shifted).unwrap(),
            m.mul_vec(&xs).unwrap()
        );
    }

    #[test]
    fn coverage_matches_covered_pixel_count(bits in prop::collection::vec(0u8..2, 36), acts in prop::collection::vec((0i64..6, 0i64..6), 0..4)) {
        prop_assume!(bits.iter().any(|&b| b == 1));
        let mask = SpatialMask::new(6, 6, bits).unwrap();
        let actions: Vec<GroupAction> = acts.into_iter().map(|(dx, dy)| GroupAction::new(dx, dy)).collect();
        let report = nullspace_coverage(&mask, &actions, 6, 6).unwrap();
        let covered = covered_pixels(&mask, &actions);
        prop_assert_eq!(report.stacked_rank, covered);
        prop_assert_eq!(report.full, covered == 36);
        prop_assert_eq!(report.missing_dims, 36 - covered);
    }
}

#[test]
fn virtual_operator_rows_are_distinct_basis_vectors() {
    let mask = make_mask(&MaskKind::Rect { top: 1, left: 2, height: 2, width: 3 }, 5, 6, 0).unwrap();
    let v = virtual_operator(&mask, GroupAction::new(4, 2), 5, 6).unwrap();
    let mut seen = BTreeSet::new();
    for r in 0..v.rows() {
        let ones: Vec<usize> = (0..v.cols()).filter(|&c| v.get(r, c) == 1.0).collect();
        assert_eq!(ones.len(), 1);
        assert!((0..v.cols()).all(|c| v.get(r, c) == 0.0 || v.get(r, c) == 1.0));
        assert!(seen.insert(ones[0]));
    }
    assert_eq!(virtual_operator(&mask, GroupAction::IDENTITY, 5, 6).unwrap(), mask_matrix(&mask).unwrap());
}

#[test]
fn default_group_covers_every_narrow_stripe() {
    let actions = GroupConfig::default().actions();
    for (h, w) in [(8, 8), (8, 10), (9, 12)] {
        for width in 1..7 {
            for start in [0, w - width] {
                let mask = make_mask(&MaskKind::Stripe { columns: vec![start..start + width] }, h, w, 0).unwrap();
                let report = nullspace_coverage(&mask, &actions, h, w).unwrap();
                assert!(report.full, "{h}x{w} stripe {start}+{width}");
                assert_eq!(covered_pixels(&mask, &actions), h * w);
            }
        }
    }
}

#[test]
fn projection_never_increases_norm() {
    for seed in 0..20 {
        let x = cube(6, 6, 3, seed);
        let mask = make_mask(&MaskKind::Random { ratio: 0.5 }, 6, 6, seed).unwrap();
        let y = apply_mask(&x, &mask).unwrap();
        let n = |c: &HsiCube| c.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        assert!(n(&y) <= n(&x));
    }
}

/// Pearson chi-square of one million draws over the 48 non-identity actions.
#[test]
fn sampler_is_uniform_over_non_identity_actions() {
    let cfg = GroupConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [[0u64; 7]; 7];
    let draws = 1_000_000u64;
    for _ in 0..draws {
        let g = sample_group(&mut rng, &cfg);
        assert!(g != GroupAction::IDENTITY && (0..7).contains(&g.dx) && (0..7).contains(&g.dy));
        counts[g.dy as usize][g.dx as usize] += 1;
    }
    assert_eq!(counts[0][0], 0);
    let expected = draws as f64 / 48.0;
    let chi2: f64 = counts
        .iter()
        .flatten()
        .skip(1)
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9th percentile of chi-square with 47 degrees of freedom.
    assert!(chi2 < 82.72, "chi-square {chi2}");
}
