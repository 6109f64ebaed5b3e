//! Forward mode and reverse mode on the same small graph.
//!
//! `f(x, w) = mean(relu(x·w))`. The JVP along a direction `v` on `w` must
//! equal the inner product of `v` with the reverse-mode gradient.

use fwdgrad::autodiff::Tape;
use fwdgrad::{RngStream, Tensor};

fn main() -> fwdgrad::Result<()> {
    let mut rng = RngStream::new(0, 0);
    let x: Tensor<f64> = rng.standard_normal([8, 5]);
    let w: Tensor<f64> = rng.standard_normal([5, 3]);
    let v: Tensor<f64> = rng.standard_normal([5, 3]);

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.variable(w);
    let h = tape.linear(xv, wv, None)?;
    let a = tape.relu(h);
    let loss = tape.mean(a);

    let tangents = tape.jvp(&[(wv, v.clone())])?;
    let jvp = tangents.get(loss).map_or(0.0, |t| t.item());
    let mut grads = tape.backward(loss, Tensor::scalar(1.0))?;
    let grad = grads.take(wv).expect("w requires a gradient");

    println!("loss           {:.6}", tape.value(loss).item());
    println!("JVP along v    {jvp:.12}");
    println!("<grad, v>      {:.12}", grad.dot(&v)?);
    Ok(())
}
