//! Central finite-difference gradient checks for every op on the tape.

use xct_tensor::gradcheck;

fn main() -> xct_tensor::Result<()> {
    let reports = gradcheck::op_suite(0)?;
    for r in &reports {
        println!(
            "{:<16} {:<20} rel {:.2e} ({} probes) {}",
            r.op,
            format!("{:?}", r.shape),
            r.rel_error,
            r.probes,
            if r.passes(1e-3) { "ok" } else { "FAIL" }
        );
    }
    let bad = reports.iter().filter(|r| !r.passes(1e-3)).count();
    println!("{} checks, {bad} failing", reports.len());
    Ok(())
}
