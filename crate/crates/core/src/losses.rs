//! Replicated local losses.
//!
//! Block features `x: [N, P, G, D]` are pooled over patches and concatenated
//! over groups into one `C = G·D` feature per example. The replicated design
//! keeps one copy of that feature per (patch, group) slice, where only patch
//! `p`, group `g` is live for differentiation and everything else sits behind
//! a stop-gradient. Every slice then carries the same loss value but its own
//! tangent.
//!
//! The naive builders materialize the copies on a [`Tape`] and serve as the
//! reference. The fused kernels compute the pooled loss once and expand
//! tangents and adjoints analytically.

use crate::autodiff::{softmax_xent_forward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-slice local loss values `[N, P, G]` and optionally their tangents.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLossOutput<T: Scalar = f32> {
    pub loss: Tensor<T>,
    pub tangent: Option<Tensor<T>>,
}

/// Adjoints produced by [`fused_local_xent_vjp`].
#[derive(Clone, Debug)]
pub struct FusedAdjoint<T: Scalar> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) struct FusedForward<T: Scalar> {
    pub loss: Tensor<T>,
    pub probs: Tensor<T>,
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [n, p, g, d] => Ok((*n, *p, *g, *d)),
        s => Err(Error::Shape(format!("local loss features must be [N, P, G, D], got {:?}", s))),
    }
}

fn check_head<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, labels: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, p, g, d) = dims4(x)?;
    let k = match w.shape() {
        [c, k] if *c == g * d => *k,
        s => return Err(Error::Shape(format!("head weight {:?} for features {:?}", s, x.shape()))),
    };
    if labels.shape() != [n, k] {
        return Err(Error::Shape(format!(
            "labels {:?} do not match {n} examples x {k} classes",
            labels.shape()
        )));
    }
    Ok((n, p, g, d, k))
}

/// Patch-mean of `[N, P, G, D]` flattened to `[N, G·D]`.
pub fn pool_patches<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, p, g, d) = dims4(x)?;
    let c = g * d;
    let mut out = vec![T::zero(); n * c];
    for ni in 0..n {
        let dst = &mut out[ni * c..(ni + 1) * c];
        for pi in 0..p {
            let src = &x.data()[(ni * p + pi) * c..(ni * p + pi + 1) * c];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = *o + v;
            }
        }
    }
    let inv = T::one() / T::from_usize(p.max(1)).unwrap();
    out.iter_mut().for_each(|v| *v = *v * inv);
    Tensor::new([n, c], out)
}

fn replicate<T: Scalar>(per_example: &[T], p: usize, g: usize) -> Tensor<T> {
    let n = per_example.len();
    Tensor::from_fn([n, p, g], |i| per_example[i / (p * g)])
}

/// `δ = softmax · Σlabels − labels`, the logit gradient of the cross-entropy.
fn logit_grad<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Tensor<T> {
    let k = probs.last_dim();
    let mut out = probs.clone();
    for (orow, trow) in out.data_mut().chunks_mut(k).zip(labels.data().chunks(k)) {
        let mass: T = trow.iter().copied().sum();
        for (o, &t) in orow.iter_mut().zip(trow) {
            *o = *o * mass - t;
        }
    }
    out
}

pub(crate) fn fused_local_xent_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<FusedForward<T>> {
    let (_, p, g, _, k) = check_head(x, w, labels)?;
    if b.shape() != [k] {
        return Err(Error::Shape(format!("head bias {:?}, expected [{k}]", b.shape())));
    }
    let pooled = pool_patches(x)?;
    let logits = crate::autodiff::linear_forward(&pooled, w, Some(b))?;
    let (loss, probs) = softmax_xent_forward(&logits, labels);
    Ok(FusedForward { loss: replicate(loss.data(), p, g), probs })
}

/// Tangent of every replicated slice.
///
/// Slice `(p, g)` sees `dx[n, p, g, :] / P` pushed through group `g` of the
/// head, plus the head's own weight and bias tangents.
pub(crate) fn fused_local_xent_jvp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    labels: &Tensor<T>,
    probs: &Tensor<T>,
    dx: Option<&Tensor<T>>,
    dw: Option<&Tensor<T>>,
    db: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, p, g, d, _) = check_head(x, w, labels)?;
    let c = g * d;
    let delta = logit_grad(probs, labels);
    let mut out = Tensor::zeros([n, p, g]);
    if let Some(dx) = dx {
        x.expect_same_shape(dx)?;
        // back[n, g·D + d] = Σ_k w[g·D + d, k] δ[n, k]
        let back = delta.matmul_nt(w)?;
        let inv_p = T::one() / T::from_usize(p).unwrap();
        for ni in 0..n {
            let brow = &back.data()[ni * c..(ni + 1) * c];
            for pi in 0..p {
                for gi in 0..g {
                    let off = ((ni * p + pi) * g + gi) * d;
                    let s: T = dx.data()[off..off + d]
                        .iter()
                        .zip(&brow[gi * d..(gi + 1) * d])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    out.data_mut()[(ni * p + pi) * g + gi] = s * inv_p;
                }
            }
        }
    }
    if dw.is_some() || db.is_some() {
        let pooled = pool_patches(x)?;
        let k = w.shape()[1];
        let mut dlogits = Tensor::zeros([n, k]);
        if let Some(dw) = dw {
            dlogits = pooled.matmul(dw)?;
        }
        if let Some(db) = db {
            for row in dlogits.data_mut().chunks_mut(k) {
                for (o, &v) in row.iter_mut().zip(db.data()) {
                    *o = *o + v;
                }
            }
        }
        for ni in 0..n {
            let s: T = dlogits.data()[ni * k..(ni + 1) * k]
                .iter()
                .zip(&delta.data()[ni * k..(ni + 1) * k])
                .map(|(&a, &b)| a * b)
                .sum();
            for v in &mut out.data_mut()[ni * p * g..(ni + 1) * p * g] {
                *v = *v + s;
            }
        }
    }
    Ok(out)
}

/// Adjoint for a cotangent `ct: [N, P, G]` on the replicated losses.
///
/// The head is shared by every slice, so its gradients collect the summed
/// cotangent (`P·G` times the pooled gradient for a uniform cotangent). The
/// input gradient of slice `(p, g)` lands only on `x[n, p, g, :]`, scaled by `1/P`.
pub(crate) fn fused_local_xent_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    labels: &Tensor<T>,
    probs: &Tensor<T>,
    ct: &Tensor<T>,
) -> Result<FusedAdjoint<T>> {
    let (n, p, g, d, k) = check_head(x, w, labels)?;
    if ct.shape() != [n, p, g] {
        return Err(Error::Shape(format!("cotangent {:?}, expected [{n}, {p}, {g}]", ct.shape())));
    }
    let c = g * d;
    let delta = logit_grad(probs, labels);
    let mut dlogits = delta.clone();
    for (ni, row) in dlogits.data_mut().chunks_mut(k).enumerate() {
        let s: T = ct.data()[ni * p * g..(ni + 1) * p * g].iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v * s);
    }
    let pooled = pool_patches(x)?;
    let dw = pooled.matmul_tn(&dlogits)?;
    let db = dlogits.sum_rows();
    let back = delta.matmul_nt(w)?;
    let inv_p = T::one() / T::from_usize(p).unwrap();
    let mut dx = Tensor::zeros([n, p, g, d]);
    for ni in 0..n {
        for pi in 0..p {
            for gi in 0..g {
                let scale = ct.data()[(ni * p + pi) * g + gi] * inv_p;
                let off = ((ni * p + pi) * g + gi) * d;
                let src = &back.data()[ni * c + gi * d..ni * c + (gi + 1) * d];
                for (o, &b) in dx.data_mut()[off..off + d].iter_mut().zip(src) {
                    *o = scale * b;
                }
            }
        }
    }
    Ok(FusedAdjoint { dx, dw, db })
}

/// Replicated aggregation on a tape: `[N, P, G, D] -> [N, P, G, G·D]`.
///
/// Slice `(p, g)` equals the patch-mean of the group-concatenated features,
/// with gradients live only through patch `p`, group `g`.
pub fn aggregate_replicated<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (n, p, g, d) = dims4(tape.value(x))?;
    let inv_p = T::one() / T::from_usize(p).unwrap();
    // Patch average with stop-gradient on the other patches.
    let avg = tape.mean_axis(x, 1)?;
    let avg = tape.broadcast_axis(avg, 1, p)?;
    let x_div_p = tape.scale(x, inv_p);
    let rest = tape.sub(avg, x_div_p)?;
    let rest = tape.stop_gradient(rest);
    let pooled = tape.add(x_div_p, rest)?;
    // Group concatenation with stop-gradient on the other groups.
    let tiled = tape.reshape(pooled, [n, p, 1, g, d])?;
    let tiled = tape.broadcast_axis(tiled, 2, g)?;
    let shape = [n, p, g, g, d];
    let eye = Tensor::from_fn(shape, |i| {
        let gj = (i / d) % g;
        let gi = (i / (d * g)) % g;
        if gi == gj {
            T::one()
        } else {
            T::zero()
        }
    });
    let off = eye.map(|m| T::one() - m);
    let live = tape.mul_const(tiled, eye)?;
    let dead = tape.mul_const(tiled, off)?;
    let dead = tape.stop_gradient(dead);
    let agg = tape.add(live, dead)?;
    tape.reshape(agg, [n, p, g, g * d])
}

/// Naive replicated cross-entropy built from tape primitives. Output `[N, P, G]`.
pub fn naive_local_xent<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, labels: &Tensor<T>) -> Result<Var> {
    let (n, p, g, _, k) = check_head(tape.value(x), tape.value(w), labels)?;
    let agg = aggregate_replicated(tape, x)?;
    let logits = tape.linear(agg, w, Some(b))?;
    let wide = Tensor::from_fn([n, p, g, k], |i| labels.data()[(i / (p * g * k)) * k + i % k]);
    tape.softmax_xent(logits, wide)
}

/// InfoNCE over dot-product similarities, replicated per (patch, group).
///
/// `x1_agg: [N, P, G, C]` are replicated first-view features, `x2: [N, P, G, D]`
/// the raw second view. `w: [C, K]` is the shared projector. With
/// `stop_grad_second_view` the second view's projections are constants.
pub fn local_infonce<T: Scalar>(
    tape: &mut Tape<T>,
    x1_agg: Var,
    x2: Var,
    w: Var,
    stop_grad_second_view: bool,
) -> Result<Var> {
    let (n, p, g, c) = dims4(tape.value(x1_agg))?;
    let (n2, _, g2, d2) = dims4(tape.value(x2))?;
    if n != n2 {
        return Err(Error::Shape(format!("view batch sizes differ: {n} vs {n2}")));
    }
    if g2 * d2 != c {
        return Err(Error::Shape(format!("second view has {} channels, first {c}", g2 * d2)));
    }
    let z1 = tape.linear(x1_agg, w, None)?;
    let pooled2 = tape.mean_axis(x2, 1)?;
    let pooled2 = tape.reshape(pooled2, [n, c])?;
    let mut z2 = tape.linear(pooled2, w, None)?;
    if stop_grad_second_view {
        z2 = tape.stop_gradient(z2);
    }
    let z2t = tape.swap_axes(z2, 0, 1)?;
    let sims = tape.linear(z1, z2t, None)?;
    let diag = Tensor::from_fn([n, p, g, n], |i| {
        if i % n == i / (p * g * n) {
            T::one()
        } else {
            T::zero()
        }
    });
    tape.softmax_xent(sims, diag)
}

/// Replicated cross-entropy through the naive tape graph.
pub fn local_xent_naive<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<LocalLossOutput<T>> {
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let l = naive_local_xent(&mut tape, xv, wv, bv, labels)?;
    Ok(LocalLossOutput { loss: tape.value(l).clone(), tangent: None })
}

/// Replicated cross-entropy computed once and copied.
pub fn local_xent_fused<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    labels: &Tensor<T>,
) -> Result<LocalLossOutput<T>> {
    let fwd = fused_local_xent_forward(x, w, b, labels)?;
    Ok(LocalLossOutput { loss: fwd.loss, tangent: None })
}

/// Fused forward plus per-slice tangents for tangents on `x`, `w`, `b`.
#[allow(clippy::too_many_arguments)]
pub fn local_xent_fused_jvp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    labels: &Tensor<T>,
    dx: Option<&Tensor<T>>,
    dw: Option<&Tensor<T>>,
    db: Option<&Tensor<T>>,
) -> Result<LocalLossOutput<T>> {
    let fwd = fused_local_xent_forward(x, w, b, labels)?;
    let t = fused_local_xent_jvp(x, w, labels, &fwd.probs, dx, dw, db)?;
    Ok(LocalLossOutput { loss: fwd.loss, tangent: Some(t) })
}

/// Fused adjoint for cotangent `ct: [N, P, G]`.
pub fn local_xent_fused_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    labels: &Tensor<T>,
    ct: &Tensor<T>,
) -> Result<FusedAdjoint<T>> {
    let fwd = fused_local_xent_forward(x, w, b, labels)?;
    fused_local_xent_vjp(x, w, labels, &fwd.probs, ct)
}

/// One-hot rows `[N, K]`.
pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l as usize] = T::one();
    }
    t
}
