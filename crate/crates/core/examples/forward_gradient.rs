//! Weight- and activity-perturbed gradient estimates for one linear layer
//! with a squared loss, compared with the exact gradient.
//!
//! Averaging more samples drives both estimates toward the true gradient;
//! the activity estimate gets there with far fewer samples.

use fwdgrad::perturb::{activity_forward_grad, weight_forward_grad};
use fwdgrad::{RngStream, Tensor};

fn cosine(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b).unwrap() / (a.dot(a).unwrap() * b.dot(b).unwrap()).sqrt()
}

fn main() -> fwdgrad::Result<()> {
    let (n, p, q) = (16, 32, 8);
    let mut rng = RngStream::new(1, 0);
    let x: Tensor<f64> = rng.standard_normal([n, p]);
    let w: Tensor<f64> = rng.standard_normal([p, q]).scale(0.1);
    let target: Tensor<f64> = rng.standard_normal([n, q]);

    // L = sum((x w - t)^2) / (2n); dL/dz = (z - t) / n.
    let dz = x.matmul(&w)?.sub(&target)?.scale(1.0 / n as f64);
    let exact = x.matmul_tn(&dz)?;

    for samples in [1, 10, 100, 1000] {
        let mut gw = Tensor::<f64>::zeros([p, q]);
        let mut ga = Tensor::<f64>::zeros([p, q]);
        for s in 0..samples {
            let mut r = rng.derive(s);
            let v: Tensor<f64> = r.standard_normal([p, q]);
            gw.axpy(1.0 / samples as f64, &weight_forward_grad(exact.dot(&v)?, &v))?;
            // One perturbation per example at the layer output.
            let u: Tensor<f64> = r.standard_normal([n, q]);
            let tangents: Vec<f64> = (0..n).map(|i| (0..q).map(|j| dz.data()[i * q + j] * u.data()[i * q + j]).sum::<f64>() * n as f64).collect();
            ga.axpy(1.0 / samples as f64, &activity_forward_grad(&x, &tangents, &u, n)?)?;
        }
        println!("{samples:>5} samples: cos(weight, exact) {:.3}  cos(activity, exact) {:.3}", cosine(&gw, &exact), cosine(&ga, &exact));
    }
    Ok(())
}
