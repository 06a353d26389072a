//! Shift-group laws, the virtual-operator identity and null-space coverage of
//! stripe masks.
//!
//! cargo run --example operator_algebra

use hyperei::hsio::{make_mask, synth_cube, CubeSpec, MaskKind};
use hyperei::operators::{
    apply_mask, apply_shift, mask_matrix, nullspace_coverage, shift_matrix, virtual_operator, CoverageReport,
    GroupAction, GroupConfig,
};

fn main() -> hyperei::Result<()> {
    let x = synth_cube(&CubeSpec::new(8, 8, 2, 2, 3))?;
    let (g, h) = (GroupAction::new(2, 5), GroupAction::new(-3, 1));
    assert_eq!(apply_shift(&apply_shift(&x, h), g), apply_shift(&x, g.compose(h)));
    assert_eq!(apply_shift(&apply_shift(&x, g), g.inverse()), x);
    println!("composition and inverse laws hold for {g} and {h}");

    let mask = make_mask(&MaskKind::Stripe { columns: vec![2..6] }, 8, 8, 0)?;
    let m = mask_matrix(&mask)?;
    let lhs = virtual_operator(&mask, g, 8, 8)?.matmul(&shift_matrix(g, 8, 8)?)?;
    assert_eq!(lhs, m);
    let once = apply_mask(&x, &mask)?;
    assert_eq!(apply_mask(&once, &mask)?, once);
    println!("virtual operator times shift equals the mask matrix; masking is idempotent");

    println!("\n{}", CoverageReport::CSV_HEADER);
    for width in 1..=7 {
        let mask = make_mask(&MaskKind::Stripe { columns: vec![0..width] }, 8, 8, 0)?;
        let full = nullspace_coverage(&mask, &GroupConfig::default().actions(), 8, 8)?;
        let single = nullspace_coverage(&mask, &[GroupAction::new(1, 0)], 8, 8)?;
        println!("{}", full.csv_line(&format!("stripe width {width}"), "shift T=7"));
        println!("{}", single.csv_line(&format!("stripe width {width}"), "(1,0)"));
    }
    Ok(())
}
