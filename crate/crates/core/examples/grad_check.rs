//! Runs every randomized oracle check and prints the worst error of each.
//!
//! `cargo run --release --example grad_check -- 20` uses 20 cases per check.

use fwdgrad::gradcheck::{all_checks, GradCheckConfig};

fn main() -> fwdgrad::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let cfg = GradCheckConfig { trials, ..Default::default() };
    for r in all_checks(&cfg)? {
        println!("{:<4} {:<40} max err {:.2e} (tol {:.0e})", if r.passed() { "ok" } else { "FAIL" }, r.name, r.max_err, r.tol);
    }
    Ok(())
}
