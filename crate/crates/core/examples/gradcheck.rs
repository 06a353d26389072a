//! Central finite-difference checks of every tape op, the whole network and
//! the training loss, printed as CSV.
//!
//! cargo run --release --example gradcheck

use hyperei::diffcore::gradcheck::op_suite;
use hyperei::model::full_model_gradcheck;
use hyperei::trainer::loss_gradcheck;

fn main() -> hyperei::Result<()> {
    let mut rows = op_suite(0)?;
    rows.push(full_model_gradcheck(0)?);
    rows.push(loss_gradcheck(0, 1.0)?);
    println!("op,max_rel_err,tolerance,status");
    for r in &rows {
        println!(
            "{},{:.3e},{:.0e},{}",
            r.op,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "fail" }
        );
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", rows.len());
    Ok(())
}
