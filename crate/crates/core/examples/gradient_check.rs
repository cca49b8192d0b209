//! Finite-difference check of every backward pass in 64-bit arithmetic.
//!
//!     cargo run --release --example gradient_check

use batchlens::gradcheck::{run, GradcheckOptions};

fn main() -> batchlens::Result<()> {
    let report = run(&GradcheckOptions::default())?;
    for c in &report.checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<20} {:.2e} (tol {:.0e}) {verdict}",
            c.name, c.max_rel_error, c.tolerance
        );
    }
    if !report.passed() {
        std::process::exit(3);
    }
    Ok(())
}
