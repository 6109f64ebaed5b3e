//! Contrastive toy trained with shared activity perturbations, with and
//! without a stop-gradient on the second view.

use fwdgrad::contrastive::{run_infonce_toy, InfonceToyConfig};

fn main() -> fwdgrad::Result<()> {
    for stop_gradient in [true, false] {
        let losses = run_infonce_toy(&InfonceToyConfig { stop_gradient, ..Default::default() })?;
        let (first, last) = (losses[0], losses[losses.len() - 1]);
        let trace: Vec<String> = losses.iter().step_by(25).map(|l| format!("{l:.3}")).collect();
        println!("stop_gradient={stop_gradient:<5} loss {first:.4} -> {last:.4} ({:+.1}%)  [{}]", 100.0 * (last / first - 1.0), trace.join(" "));
    }
    Ok(())
}
