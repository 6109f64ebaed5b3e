//! Estimator variances on the 4-4-1 tanh network against the closed forms,
//! over batch sizes 1..=64.

use fwdgrad::variance_lab::{sweep, SweepAxis, SweepConfig, CSV_HEADER};

fn main() {
    let mut cfg = SweepConfig::new(SweepAxis::Batch);
    cfg.max = 64;
    cfg.work_budget = 2_000_000;
    println!("{CSV_HEADER}");
    let rows = sweep(&cfg);
    for r in &rows {
        println!("{}", r.csv_row());
    }
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    println!("max relative error {worst:.3}");
}
