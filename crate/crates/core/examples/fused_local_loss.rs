//! Replicated local cross-entropy: one loss per (example, patch, group),
//! computed by the fused kernel and by the naive tape graph.

use fwdgrad::losses::{local_xent_fused, local_xent_fused_jvp, local_xent_naive, one_hot};
use fwdgrad::{RngStream, Tensor};

fn main() -> fwdgrad::Result<()> {
    let (n, p, g, d, k) = (4, 9, 4, 8, 10);
    let mut rng = RngStream::new(2, 0);
    let x: Tensor<f32> = rng.standard_normal([n, p, g, d]);
    let w: Tensor<f32> = rng.standard_normal([g * d, k]).scale(0.1);
    let b: Tensor<f32> = Tensor::zeros([k]);
    let labels = one_hot::<f32>(&[3, 1, 4, 1], k);

    let fused = local_xent_fused(&x, &w, &b, &labels)?;
    let naive = local_xent_naive(&x, &w, &b, &labels)?;
    println!("loss shape {:?}", fused.loss.shape());
    println!("max |fused - naive| = {:.2e}", fused.loss.sub(&naive.loss)?.max_abs());

    // Perturbing one patch of one group only moves that slice's loss.
    let mut dx = Tensor::<f32>::zeros([n, p, g, d]);
    dx.data_mut()[((2 * p + 5) * g + 1) * d] = 1.0;
    let t = local_xent_fused_jvp(&x, &w, &b, &labels, Some(&dx), None, None)?.tangent.expect("tangent requested");
    let live: Vec<usize> = t.data().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
    println!("nonzero tangent slices (flat n·P·G index): {live:?}, expected [{}]", (2 * p + 5) * g + 1);
    Ok(())
}
