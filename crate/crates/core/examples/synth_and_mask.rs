//! Synthesize a low-rank cube, build the three mask families and round-trip
//! both through their binary formats.
//!
//! cargo run --example synth_and_mask

use hyperei::hsio::{
    decode_cube, decode_mask, encode_cube, encode_mask, make_mask, normalize, synth_cube, CubeSpec, MaskKind,
};
use hyperei::operators::apply_mask;

fn main() -> hyperei::Result<()> {
    let cube = synth_cube(&CubeSpec::new(32, 32, 8, 3, 7))?;
    let (lo, hi) = cube
        .data()
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    println!("cube {}x{}x{}, values in [{lo}, {hi}]", cube.height(), cube.width(), cube.bands());
    assert_eq!(normalize(&cube)?, cube, "synthetic cubes come out normalized");

    let bytes = encode_cube(&cube)?;
    assert_eq!(encode_cube(&decode_cube(&bytes)?)?, bytes);
    println!("HSC1 file: {} bytes, round trip byte-identical", bytes.len());

    let kinds = [
        ("stripe", MaskKind::Stripe { columns: vec![14..18] }),
        (
            "rect",
            MaskKind::Rect {
                top: 8,
                left: 8,
                height: 10,
                width: 6,
            },
        ),
        ("random", MaskKind::Random { ratio: 0.3 }),
    ];
    for (name, kind) in kinds {
        let mask = make_mask(&kind, 32, 32, 1)?;
        let raw = encode_mask(&mask)?;
        assert_eq!(decode_mask(&raw)?, mask);
        let y = apply_mask(&cube, &mask)?;
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        println!(
            "{name:>6} mask: {} missing pixels, {} zero samples in the measurement",
            mask.missing_count(),
            zeros
        );
    }
    Ok(())
}
