//! Perturbation sampling and the two forward-gradient estimators.
//!
//! Weight perturbation draws a direction `v` over a weight matrix, measures
//! the loss directional derivative `Σ ∇w·v` with one tangent pass and returns
//! `(Σ ∇w·v) v`. Activity perturbation draws `u` at a linear layer's output
//! `z`, measures `Σ ∇z·u` per example and returns `x (Σ ∇z·u) uᵀ`, averaged
//! over the batch.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{gemm_into, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Weights,
    Activities,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Sharing {
    /// One draw reused by every example in the batch.
    Shared,
    /// A fresh draw per example.
    #[default]
    Independent,
}

impl std::str::FromStr for Sharing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Sharing::Shared),
            "independent" => Ok(Sharing::Independent),
            _ => Err(Error::Config(format!("unknown sharing mode {s:?} (shared | independent)"))),
        }
    }
}

impl std::fmt::Display for Sharing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sharing::Shared => "shared",
            Sharing::Independent => "independent",
        })
    }
}

/// A place that receives a perturbation.
///
/// For activity targets `shape` is the per-example shape of the linear output
/// (for example `[P, G, E]`); for weight targets it is the weight's shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Site {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Site {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>) -> Self {
        Site { name: name.into(), shape: shape.into() }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbationPlan {
    pub target: Target,
    pub sharing: Sharing,
    pub relu_masking: bool,
    pub sites: Vec<Site>,
}

impl PerturbationPlan {
    pub fn new(target: Target, sharing: Sharing, sites: Vec<Site>) -> Self {
        PerturbationPlan { target, sharing, relu_masking: false, sites }
    }

    pub fn with_relu_masking(mut self, on: bool) -> Self {
        self.relu_masking = on;
        self
    }

    /// Batched training cannot use per-example weight perturbations: every
    /// example would need its own weight matrix, so the layer no longer
    /// reduces to one matrix product.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.target == Target::Weights && self.sharing == Sharing::Independent {
            return Err(Error::Config(
                "independent weight perturbation is not batchable; use shared sharing for training".into(),
            ));
        }
        Ok(())
    }
}

/// Per-parameter forward-gradient updates with the loss and its tangent.
#[derive(Clone, Debug)]
pub struct ForwardGradEstimate<T: Scalar = f32> {
    pub grads: Vec<Tensor<T>>,
    pub loss: f64,
    pub loss_tangent: f64,
}

/// Weight-perturbed estimate `true_dot · v`.
pub fn weight_forward_grad<T: Scalar>(true_dot: T, v: &Tensor<T>) -> Tensor<T> {
    v.scale(true_dot)
}

/// Activity-perturbed estimate for a weight `[p, q]`.
///
/// `x: [rows, p]` holds the layer inputs, `loss_tangent: [rows]` the loss
/// tangent seen by each row and `u: [rows, q]` the perturbation at each row's
/// output. Rows may be examples or (example, token) pairs; the sum over rows
/// is divided by `batch`.
pub fn activity_forward_grad<T: Scalar>(
    x: &Tensor<T>,
    loss_tangent: &[T],
    u: &Tensor<T>,
    batch: usize,
) -> Result<Tensor<T>> {
    let (rows, p) = x.rows_cols();
    let (urows, q) = u.rows_cols();
    if urows != rows || loss_tangent.len() != rows {
        return Err(Error::Shape(format!(
            "activity estimate: x has {rows} rows, u has {urows}, tangent has {}",
            loss_tangent.len()
        )));
    }
    let mut scaled = u.data().to_vec();
    for (row, &t) in scaled.chunks_mut(q.max(1)).zip(loss_tangent) {
        row.iter_mut().for_each(|v| *v = *v * t);
    }
    let mut out = vec![T::zero(); p * q];
    let alpha = T::one() / T::from_usize(batch.max(1)).unwrap();
    gemm_into(true, false, p, rows, q, x.data(), &scaled, alpha, T::zero(), &mut out);
    Tensor::new([p, q], out)
}

/// Zeroes `u` wherever `mask_source <= 0`.
pub fn apply_relu_mask<T: Scalar>(u: &mut Tensor<T>, mask_source: &Tensor<T>) -> Result<()> {
    u.expect_same_shape(mask_source)?;
    for (v, &m) in u.data_mut().iter_mut().zip(mask_source.data()) {
        if m <= T::zero() {
            *v = T::zero();
        }
    }
    Ok(())
}

/// One tangent tensor per site.
///
/// Activity sites get `[batch, ..shape]`. Weight sites get `shape` when
/// shared and `[batch, ..shape]` when independent. Site `s`, example `n`
/// draws from `rng.derive_path([s, n])`; a shared site draws once from
/// `rng.derive_path([s])` and, for activities, repeats it over the batch.
pub fn make_batch_perturbations<T: Scalar>(
    plan: &PerturbationPlan,
    rng: &RngStream,
    batch: usize,
) -> Vec<Tensor<T>> {
    plan.sites
        .iter()
        .enumerate()
        .map(|(s, site)| {
            let m = site.numel();
            let mut shape = vec![batch];
            shape.extend_from_slice(&site.shape);
            match (plan.sharing, plan.target) {
                (Sharing::Shared, Target::Weights) => rng.derive_path(&[s as u64]).standard_normal(site.shape.clone()),
                (Sharing::Shared, Target::Activities) => {
                    let one: Tensor<T> = rng.derive_path(&[s as u64]).standard_normal([m]);
                    let mut data = Vec::with_capacity(batch * m);
                    for _ in 0..batch {
                        data.extend_from_slice(one.data());
                    }
                    Tensor::new(shape, data).unwrap()
                }
                (Sharing::Independent, _) => {
                    let mut data = Vec::with_capacity(batch * m);
                    for n in 0..batch {
                        let draw: Tensor<T> = rng.derive_path(&[s as u64, n as u64]).standard_normal([m]);
                        data.extend_from_slice(draw.data());
                    }
                    Tensor::new(shape, data).unwrap()
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weight_estimate_hand_example() {
        let grad = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::new([2, 2], vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let dot = grad.dot(&v).unwrap();
        assert_eq!(dot, 6.0);
        assert_eq!(weight_forward_grad(dot, &v).data(), &[6.0, -6.0, 6.0, 6.0]);
    }

    #[test]
    fn zero_gradient_gives_zero_estimate() {
        let mut rng = RngStream::new(3, 0);
        let v: Tensor<f64> = rng.standard_normal([3, 5]);
        assert_eq!(weight_forward_grad(0.0, &v).max_abs(), 0.0);
        let x: Tensor<f64> = rng.standard_normal([4, 3]);
        let u: Tensor<f64> = rng.standard_normal([4, 5]);
        assert_eq!(activity_forward_grad(&x, &[0.0; 4], &u, 4).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn scalar_weight_estimate_is_unbiased() {
        // p = q = 1: estimate = g v², E[v²] = 1.
        let mut rng = RngStream::new(4, 0);
        let g = 1.7;
        let n = 200_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let v = Tensor::scalar(rng.normal());
                weight_forward_grad(g * v.item(), &v).item()
            })
            .sum::<f64>()
            / n as f64;
        // Var(g v²) = 2 g², so the standard error is g sqrt(2 / n).
        assert!((mean - g).abs() < 4.0 * g * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn single_unit_activity_estimate_is_unbiased() {
        let mut rng = RngStream::new(5, 0);
        let (x, dz) = (0.8, -1.3);
        let n = 200_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let u = rng.normal();
                let xt = Tensor::new([1, 1], vec![x]).unwrap();
                let ut = Tensor::new([1, 1], vec![u]).unwrap();
                activity_forward_grad(&xt, &[dz * u], &ut, 1).unwrap().item()
            })
            .sum::<f64>()
            / n as f64;
        let sd = (x * dz).abs() * 2f64.sqrt();
        assert!((mean - x * dz).abs() < 4.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn activity_estimate_matches_explicit_outer_products() {
        let mut rng = RngStream::new(6, 0);
        let x: Tensor<f64> = rng.standard_normal([5, 3]);
        let u: Tensor<f64> = rng.standard_normal([5, 4]);
        let t: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let g = activity_forward_grad(&x, &t, &u, 2).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..5).map(|r| x.data()[r * 3 + i] * t[r] * u.data()[r * 4 + j]).sum::<f64>() / 2.0;
                assert!((g.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    fn plan(sharing: Sharing, target: Target) -> PerturbationPlan {
        PerturbationPlan::new(target, sharing, vec![Site::new("a", [2, 3]), Site::new("b", [5])])
    }

    #[test]
    fn shared_slices_identical_independent_distinct() {
        let rng = RngStream::new(9, 1);
        let shared = make_batch_perturbations::<f32>(&plan(Sharing::Shared, Target::Activities), &rng, 4);
        for t in &shared {
            let m = t.len() / 4;
            for n in 1..4 {
                assert_eq!(&t.data()[..m], &t.data()[n * m..(n + 1) * m]);
            }
        }
        let ind = make_batch_perturbations::<f32>(&plan(Sharing::Independent, Target::Activities), &rng, 4);
        for t in &ind {
            let m = t.len() / 4;
            for a in 0..4 {
                for b in a + 1..4 {
                    assert_ne!(&t.data()[a * m..(a + 1) * m], &t.data()[b * m..(b + 1) * m]);
                }
            }
        }
        assert_eq!(ind[0].shape(), &[4, 2, 3]);
        let w = make_batch_perturbations::<f32>(&plan(Sharing::Shared, Target::Weights), &rng, 4);
        assert_eq!(w[0].shape(), &[2, 3]);
    }

    #[test]
    fn reseeding_reproduces_and_sites_differ() {
        let p = plan(Sharing::Independent, Target::Activities);
        let a = make_batch_perturbations::<f64>(&p, &RngStream::new(1, 2), 3);
        let b = make_batch_perturbations::<f64>(&p, &RngStream::new(1, 2), 3);
        assert_eq!(a, b);
        let c = make_batch_perturbations::<f64>(&p, &RngStream::new(1, 3), 3);
        assert_ne!(a, c);
    }

    #[test]
    fn independent_weights_rejected_for_training() {
        assert!(plan(Sharing::Independent, Target::Weights).validate_for_training().is_err());
        assert!(plan(Sharing::Shared, Target::Weights).validate_for_training().is_ok());
        assert!(plan(Sharing::Independent, Target::Activities).validate_for_training().is_ok());
    }

    #[test]
    fn relu_mask_zeroes_dead_units() {
        let mut u = Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        apply_relu_mask(&mut u, &Tensor::new([4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap()).unwrap();
        assert_eq!(u.data(), &[0.0, 0.0, 3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn estimates_scale_with_the_loss(c in -5.0f64..5.0, seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 0);
            let x: Tensor<f64> = rng.standard_normal([3, 2]);
            let u: Tensor<f64> = rng.standard_normal([3, 4]);
            let t: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let ct: Vec<f64> = t.iter().map(|v| v * c).collect();
            let g = activity_forward_grad(&x, &t, &u, 3).unwrap();
            let gc = activity_forward_grad(&x, &ct, &u, 3).unwrap();
            let diff = gc.sub(&g.scale(c)).unwrap().max_abs();
            prop_assert!(diff <= 1e-12 * (1.0 + gc.max_abs()));
            let v: Tensor<f64> = rng.standard_normal([2, 2]);
            let d = rng.normal();
            prop_assert_eq!(weight_forward_grad(c * d, &v), v.scale(c * d));
        }
    }
}
