//! Round trips, normalization and synthetic-cube properties of the I/O layer.

use nalgebra::DMatrix;
use proptest::prelude::*;

use hyperei::hsio::{
    decode_cube, decode_mask, encode_cube, encode_mask, make_mask, normalize, synth_cube, CubeSpec, HsiCube,
    MaskKind, SpatialMask,
};
use hyperei::operators::apply_mask;
use hyperei::Error;

fn cube_strategy() -> impl Strategy<Value = HsiCube> {
    (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-10.0f32..10.0, h * w * c).prop_map(move |d| HsiCube::new(h, w, c, d).unwrap())
    })
}

fn mask_strategy() -> impl Strategy<Value = SpatialMask> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
        prop::collection::vec(0u8..2, h * w).prop_map(move |b| SpatialMask::new(h, w, b).unwrap())
    })
}

/// Rank of the `(H·W) × bands` matrix from a plain SVD.
fn spectral_rank(cube: &HsiCube) -> usize {
    let n = cube.pixels();
    let m = DMatrix::from_fn(n, cube.bands(), |p, b| cube.band(b)[p] as f64);
    let sv = m.singular_values();
    let max = sv.max();
    sv.iter().filter(|&&s| s > 1e-5 * max).count()
}

proptest! {
    #[test]
    fn cube_round_trip_is_byte_identical(cube in cube_strategy()) {
        let bytes = encode_cube(&cube).unwrap();
        let back = decode_cube(&bytes).unwrap();
        prop_assert_eq!(&back, &cube);
        prop_assert_eq!(encode_cube(&back).unwrap(), bytes);
    }

    #[test]
    fn mask_round_trip_is_byte_identical(mask in mask_strategy()) {
        let bytes = encode_mask(&mask).unwrap();
        let back = decode_mask(&bytes).unwrap();
        prop_assert_eq!(&back, &mask);
        prop_assert_eq!(encode_mask(&back).unwrap(), bytes);
    }

    #[test]
    fn normalize_is_idempotent_and_bounded(cube in cube_strategy()) {
        match normalize(&cube) {
            Ok(n) => {
                prop_assert!(n.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let twice = normalize(&n).unwrap();
                for (a, b) in twice.data().iter().zip(n.data()) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
            Err(e) => prop_assert!(matches!(e, Error::Degenerate(_))),
        }
    }

    #[test]
    fn masking_is_a_projection(cube in cube_strategy(), seed in 0u64..1000) {
        let mask = make_mask(&MaskKind::Random { ratio: 0.4 }, cube.height(), cube.width(), seed);
        if let Ok(mask) = mask {
            let y = apply_mask(&cube, &mask).unwrap();
            prop_assert_eq!(apply_mask(&y, &mask).unwrap(), y.clone());
            let norm = |c: &HsiCube| c.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            prop_assert!(norm(&y) <= norm(&cube));
        }
    }

    #[test]
    fn truncation_anywhere_is_a_format_error(cube in cube_strategy(), cut in 0usize..64) {
        let bytes = encode_cube(&cube).unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(
            matches!(decode_cube(&bytes[..cut]), Err(Error::Format { .. })),
            "cut at {}", cut
        );
    }
}

#[test]
fn synthetic_cubes_have_the_requested_rank() {
    for (rank, seed) in [(1, 0), (2, 3), (3, 7), (5, 11)] {
        let cube = synth_cube(&CubeSpec::new(24, 20, 8, rank, seed)).unwrap();
        assert_eq!(spectral_rank(&cube), rank, "rank {rank} seed {seed}");
    }
}

#[test]
fn synthetic_cubes_are_deterministic_and_seed_dependent() {
    let spec = CubeSpec::new(16, 16, 6, 3, 42);
    let a = encode_cube(&synth_cube(&spec).unwrap()).unwrap();
    let b = encode_cube(&synth_cube(&spec).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = encode_cube(&synth_cube(&CubeSpec { seed: 43, ..spec }).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn corrupted_headers_report_offsets() {
    let cube = synth_cube(&CubeSpec::new(4, 4, 2, 1, 0)).unwrap();
    let bytes = encode_cube(&cube).unwrap();
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(decode_cube(&bad), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(decode_cube(&bad), Err(Error::Format { offset: 4, .. })));
    let mut bad = bytes.clone();
    bad[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode_cube(&bad), Err(Error::Format { offset: 20, .. })));
    let mut bad = bytes;
    bad.push(0);
    let err = decode_cube(&bad).unwrap_err();
    assert!(err.to_string().contains("offset 144"), "{err}");
}

#[test]
fn stripe_mask_counts() {
    let m = make_mask(&MaskKind::Stripe { columns: vec![10..14] }, 32, 32, 0).unwrap();
    assert_eq!(m.missing_count(), 4 * 32);
    let r1 = make_mask(&MaskKind::Random { ratio: 0.3 }, 20, 20, 1).unwrap();
    let r2 = make_mask(&MaskKind::Random { ratio: 0.3 }, 20, 20, 1).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.missing_count(), 120);
}
