//! Toy contrastive task trained with activity-perturbed forward gradients.
//!
//! Each example is a noisy copy of one of a few cluster centres and its two
//! views add independent noise. A one-layer ReLU encoder with normalized
//! output maps both views to features, a fixed random projector feeds
//! [`local_infonce`], and the second view is the target.
//!
//! Every step draws one perturbation per example for the encoder's linear
//! outputs, shared by the example's two views, as if the views were two rows
//! of one batch. `T` is the directional derivative of the mean loss and each
//! view contributes `x ⊗ (u · T)` to the encoder update. With the
//! stop-gradient, second-view perturbations do not reach `T`.

use crate::autodiff::{NormGrad, Tape};
use crate::error::Result;
use crate::losses::local_infonce;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InfonceToyConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Projector output width.
    pub embed: usize,
    pub clusters: usize,
    pub batch: usize,
    /// Standard deviation of the per-view noise.
    pub view_noise: f64,
    pub steps: usize,
    pub lr: f64,
    pub stop_gradient: bool,
    pub seed: u64,
}

impl Default for InfonceToyConfig {
    fn default() -> Self {
        InfonceToyConfig {
            input_dim: 16,
            hidden: 32,
            embed: 8,
            clusters: 8,
            batch: 32,
            view_noise: 0.3,
            steps: 200,
            lr: 0.1,
            stop_gradient: true,
            seed: 0,
        }
    }
}

/// Mean loss of one batch and, when `u` is given, the encoder update direction.
fn loss_and_update(
    w: &Tensor<f64>,
    proj: &Tensor<f64>,
    x1: &Tensor<f64>,
    x2: &Tensor<f64>,
    u: Option<&Tensor<f64>>,
    stop_gradient: bool,
) -> Result<(f64, Option<Tensor<f64>>)> {
    let n = x1.shape()[0];
    let c = w.shape()[1];
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let pv = tape.constant(proj.clone());
    let mut feats = Vec::new();
    let mut sites = Vec::new();
    for x in [x1, x2] {
        let xv = tape.constant(x.clone());
        let a = tape.linear(xv, wv, None)?;
        sites.push(a);
        let h = tape.relu(a);
        let h = tape.normalize(h, NormGrad::Exact);
        feats.push(tape.reshape(h, [n, 1, 1, c])?);
    }
    let l = local_infonce(&mut tape, feats[0], feats[1], pv, stop_gradient)?;
    let total = tape.sum(l);
    let loss = tape.value(total).data()[0] / n as f64;
    let Some(u) = u else { return Ok((loss, None)) };
    let tan = tape.jvp(&[(sites[0], u.clone()), (sites[1], u.clone())])?;
    let t = tan.get(total).map_or(0.0, |t| t.data()[0]) / n as f64;
    let ut = u.scale(t);
    let mut g = x1.matmul_tn(&ut)?;
    g.axpy(1.0, &x2.matmul_tn(&ut)?)?;
    Ok((loss, Some(g)))
}

/// Trains the encoder and returns the loss on a fixed evaluation batch
/// before every step, plus the final loss.
pub fn run_infonce_toy(cfg: &InfonceToyConfig) -> Result<Vec<f64>> {
    let root = RngStream::new(cfg.seed, 0x6e63_65);
    let mut init = root.derive(0);
    let d = cfg.input_dim;
    let centres: Tensor<f64> = init.standard_normal([cfg.clusters, d]);
    let mut w: Tensor<f64> = init.standard_normal([d, cfg.hidden]).scale(1.0 / (d as f64).sqrt());
    let proj: Tensor<f64> = init.standard_normal([cfg.hidden, cfg.embed]).scale(1.0 / (cfg.hidden as f64).sqrt());
    let draw_views = |rng: &mut RngStream| {
        let ids: Vec<usize> = (0..cfg.batch).map(|_| rng.below(cfg.clusters)).collect();
        let view = |rng: &mut RngStream| {
            Tensor::from_fn([cfg.batch, d], |i| centres.data()[ids[i / d] * d + i % d] + cfg.view_noise * rng.normal())
        };
        let a = view(rng);
        (a, view(rng))
    };
    let (e1, e2) = draw_views(&mut root.derive(1));
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        losses.push(loss_and_update(&w, &proj, &e1, &e2, None, cfg.stop_gradient)?.0);
        let mut rng = root.derive(2 + step as u64);
        let (x1, x2) = draw_views(&mut rng);
        let u: Tensor<f64> = rng.standard_normal([cfg.batch, cfg.hidden]);
        let (_, g) = loss_and_update(&w, &proj, &x1, &x2, Some(&u), cfg.stop_gradient)?;
        w.axpy(-cfg.lr, &g.expect("update requested"))?;
    }
    losses.push(loss_and_update(&w, &proj, &e1, &e2, None, cfg.stop_gradient)?.0);
    Ok(losses)
}
