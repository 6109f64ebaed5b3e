//! Training loop for the six algorithms.
//!
//! | algo | block weights | stop-gradient between blocks |
//! |---|---|---|
//! | `bp` | reverse mode on the classifier loss | no |
//! | `lg-bp` | reverse mode on each block's local loss | yes |
//! | `fg-w` | weight-perturbed forward gradient | no |
//! | `fg-a` | activity-perturbed forward gradient | no |
//! | `lg-fg-w` | weight-perturbed, per local loss | yes |
//! | `lg-fg-a` | activity-perturbed, per local loss | yes |
//!
//! Projector heads and the classifier always get exact one-layer gradients
//! on detached features. Forward-gradient algorithms estimate the body
//! gradient of the summed local losses. The global variants use one scalar
//! tangent per example (all losses, all perturbations). The local variants
//! give every unit the tangent of the (block, patch, group) loss it feeds.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::{grouped_weight_grad, softmax_xent_forward, NormGrad, Tape};
use crate::data::{batches, sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::pool_patches;
use crate::mixer::{
    build_forward, expand_slices, full_forward, pad_images, patchify, Affine, ForwardOptions, MixerConfig,
    MixerParams, MixerTrace, NormPlacement, Preset, SiteKind,
};
use crate::perturb::{apply_relu_mask, make_batch_perturbations, PerturbationPlan, Sharing, Site, Target};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

const PERTURB_STREAM: u64 = 0x7065_7274;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    Bp,
    LgBp,
    FgW,
    FgA,
    LgFgW,
    LgFgA,
}

impl Algo {
    pub const ALL: [Algo; 6] = [Algo::Bp, Algo::LgBp, Algo::FgW, Algo::FgA, Algo::LgFgW, Algo::LgFgA];

    pub fn id(self) -> &'static str {
        match self {
            Algo::Bp => "bp",
            Algo::LgBp => "lg-bp",
            Algo::FgW => "fg-w",
            Algo::FgA => "fg-a",
            Algo::LgFgW => "lg-fg-w",
            Algo::LgFgA => "lg-fg-a",
        }
    }

    pub fn greedy(self) -> bool {
        matches!(self, Algo::LgBp | Algo::LgFgW | Algo::LgFgA)
    }

    /// The perturbation target of forward-gradient algorithms.
    pub fn target(self) -> Option<Target> {
        match self {
            Algo::FgW | Algo::LgFgW => Some(Target::Weights),
            Algo::FgA | Algo::LgFgA => Some(Target::Activities),
            Algo::Bp | Algo::LgBp => None,
        }
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?} (expected bp, lg-bp, fg-w, fg-a, lg-fg-w or lg-fg-a)")))
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    /// `base · (1 - step / total)`.
    #[default]
    Linear,
    /// Linear warm-up to `base`, then a half cosine to zero.
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?} (expected linear or cosine)"))),
        }
    }
}

/// Learning rate at `step` of `total` (`0 <= step <= total`).
pub fn lr_at(schedule: Schedule, step: usize, total: usize, base: f64, warmup: usize) -> f64 {
    let total = total.max(1);
    match schedule {
        Schedule::Linear => base * (1.0 - step as f64 / total as f64),
        Schedule::Cosine => {
            if step < warmup {
                return base * step as f64 / warmup as f64;
            }
            let span = (total.saturating_sub(warmup)).max(1) as f64;
            let t = ((step - warmup) as f64 / span).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algo: Algo,
    pub preset: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    /// Warm-up length in steps for the cosine schedule.
    pub warmup_steps: usize,
    pub seed: u64,
    /// Activity perturbations only; weight perturbations are always shared.
    pub sharing: Sharing,
    pub relu_masking: bool,
    pub placement: NormPlacement,
    pub norm_grad: NormGrad,
    /// Perturbation samples averaged per step.
    pub samples: usize,
    /// Pixel standardization applied before the model.
    pub pixel_mean: f32,
    pub pixel_std: f32,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: Algo::LgFgA,
            preset: Preset::S1_1,
            epochs: 1000,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            schedule: Schedule::Linear,
            warmup_steps: 0,
            seed: 0,
            sharing: Sharing::Independent,
            relu_masking: true,
            placement: NormPlacement::BeforeAndAfter,
            norm_grad: NormGrad::Exact,
            samples: 1,
            pixel_mean: crate::data::MNIST_MEAN,
            pixel_std: crate::data::MNIST_STD,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            placement: self.placement,
            norm_grad: self.norm_grad,
            greedy: self.algo.greedy(),
            detach_classifier: self.algo != Algo::Bp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples == 0 {
            return Err(Error::Config("batch size and samples must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!("lr {} / momentum {} out of range", self.lr, self.momentum)));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Error on the training batches as they were seen during the epoch.
    pub train_err: f64,
    pub test_err: f64,
    /// Mean classifier loss over the epoch's batches.
    pub loss: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_err,test_err,loss,lr,seconds";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{:.6},{:.6e},{:.3}",
            self.epoch, self.train_err, self.test_err, self.loss, self.lr, self.seconds
        )
    }
}

/// Loss and accuracy of one step, measured before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub local_losses: Vec<f64>,
    pub correct: usize,
    pub count: usize,
}

/// Plain SGD with momentum: `v = m·v + g; p -= lr·v`.
pub fn sgd_update<T: Scalar>(params: &mut [&mut Tensor<T>], velocity: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64, momentum: f64) -> Result<()> {
    let (lr, m) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        p.expect_same_shape(g)?;
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = m * *vi + gi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// Mean cross-entropy of a linear softmax head and its exact gradient.
pub fn head_gradient<T: Scalar>(features: &Tensor<T>, head: &Affine<T>, labels: &Tensor<T>) -> Result<(f64, Affine<T>)> {
    let logits = crate::autodiff::linear_forward(features, &head.w, Some(&head.b))?;
    let (loss, probs) = softmax_xent_forward(&logits, labels);
    let n = labels.shape()[0].max(1);
    let inv = T::one() / T::from_usize(n).unwrap();
    let delta = probs.sub(labels)?.scale(inv);
    let (rows, c) = features.rows_cols();
    let w = features.reshape([rows, c])?.matmul_tn(&delta)?;
    Ok((loss.sum().to_f64().unwrap() / n as f64, Affine { w, b: delta.sum_rows() }))
}

/// Weight and bias gradient of a linear site from its input and an output cotangent.
fn site_param_grad<T: Scalar>(kind: SiteKind, x: &Tensor<T>, g: &Tensor<T>, batch: usize) -> Result<Affine<T>> {
    let inv = T::one() / T::from_usize(batch).unwrap();
    Ok(match kind {
        SiteKind::Grouped => {
            let s = g.shape();
            let (groups, e) = (s[s.len() - 2], s[s.len() - 1]);
            Affine { w: grouped_weight_grad(x, g)?.scale(inv), b: g.sum_rows_grouped(groups, e).scale(inv) }
        }
        SiteKind::Dense | SiteKind::Token => {
            let (rows, c) = x.rows_cols();
            let d = g.last_dim();
            Affine { w: x.reshape([rows, c])?.matmul_tn(&g.reshape([rows, d])?)?.scale(inv), b: g.sum_rows().scale(inv) }
        }
    })
}

fn block_affine_mut<T: Scalar>(p: &mut MixerParams<T>, block: usize, kind: SiteKind) -> &mut Affine<T> {
    let b = &mut p.blocks[block];
    match kind {
        SiteKind::Token => b.token.as_mut().expect("token site in a block with token weights"),
        SiteKind::Dense => &mut b.dense,
        SiteKind::Grouped => &mut b.grouped,
    }
}

fn add_affine<T: Scalar>(acc: &mut Affine<T>, g: &Affine<T>) -> Result<()> {
    acc.w.axpy(T::one(), &g.w)?;
    acc.b.axpy(T::one(), &g.b)
}

/// Block weights in [`MixerParams::named_tensors`] order with their kinds.
fn body_layout<T: Scalar>(params: &MixerParams<T>) -> Vec<(usize, SiteKind)> {
    let mut out = Vec::new();
    for (i, b) in params.blocks.iter().enumerate() {
        if b.token.is_some() {
            out.push((i, SiteKind::Token));
        }
        out.push((i, SiteKind::Dense));
        out.push((i, SiteKind::Grouped));
    }
    out
}

/// Gradient estimate for every parameter on one batch.
///
/// `tokens: [N, P, patch_len]`, `labels: [N, K]`. The perturbation stream is
/// `rng`; sample `s` draws from `rng.derive(s)`.
pub fn estimate_gradients<T: Scalar>(
    params: &MixerParams<T>,
    tokens: &Tensor<T>,
    labels: &Tensor<T>,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(MixerParams<T>, StepStats)> {
    let algo = cfg.algo;
    let n = tokens.shape()[0];
    let opts = cfg.forward_options();
    let mut tape = Tape::new();
    let body_grad = algo.target().is_none();
    let trace = build_forward(&mut tape, params, tokens.clone(), body_grad, opts)?;
    let mut grads = params.zeros_like();

    // Heads.
    let mut local_losses = Vec::new();
    for (b, &f) in trace.local_features.iter().enumerate() {
        let pooled = pool_patches(tape.value(f))?;
        let (l, g) = head_gradient(&pooled, &params.proj[b], labels)?;
        local_losses.push(l);
        grads.proj[b] = g;
    }
    let (loss, g) = head_gradient(tape.value(trace.pooled), &params.classifier, labels)?;
    grads.classifier = g;
    let correct = count_correct(tape.value(trace.logits), labels);
    if !loss.is_finite() || local_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("training loss".into()));
    }

    match algo.target() {
        None => backprop_body(&mut tape, &trace, params, labels, algo, &mut grads)?,
        Some(target) => {
            let loss_vars = trace
                .local_features
                .iter()
                .zip(&trace.params.proj)
                .map(|(&f, h)| tape.fused_local_xent(f, h.w, h.b, labels.clone()))
                .collect::<Result<Vec<_>>>()?;
            let inv = T::one() / T::from_usize(cfg.samples).unwrap();
            for s in 0..cfg.samples {
                let est = forward_body(&tape, &trace, &loss_vars, params, cfg, target, &rng.derive(s as u64), n)?;
                for (dst, src) in grads.tensors_mut().into_iter().zip(est.named_tensors()) {
                    if s + 1 == cfg.samples && cfg.samples > 1 {
                        dst.axpy(T::one(), src.1)?;
                        *dst = dst.scale(inv);
                    } else {
                        dst.axpy(T::one(), src.1)?;
                    }
                }
            }
        }
    }
    Ok((grads, StepStats { loss, local_losses, correct, count: n }))
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>) -> usize {
    let k = logits.last_dim();
    logits.data().chunks(k).zip(labels.data().chunks(k)).filter(|(l, t)| argmax(l) == argmax(t)).count()
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn backprop_body<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &MixerTrace,
    params: &MixerParams<T>,
    labels: &Tensor<T>,
    algo: Algo,
    grads: &mut MixerParams<T>,
) -> Result<()> {
    let n = labels.shape()[0];
    let inv = T::one() / T::from_usize(n).unwrap();
    let root = if algo == Algo::Bp {
        let xent = tape.softmax_xent(trace.logits, labels.clone())?;
        let s = tape.sum(xent);
        tape.scale(s, inv)
    } else {
        let mut total = None;
        for (&f, h) in trace.local_features.iter().zip(&trace.params.proj) {
            let l = tape.fused_local_xent(f, h.w, h.b, labels.clone())?;
            let s = tape.sum(l);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s)?,
            });
        }
        tape.scale(total.expect("at least one block"), inv)
    };
    let mut g = tape.backward(root, Tensor::scalar(T::one()))?;
    let vars: Vec<_> = trace.params.all();
    let body = params.named_tensors().len() - 2 * params.proj.len() - 2;
    for (dst, var) in grads.tensors_mut().into_iter().zip(vars).take(body) {
        if let Some(t) = g.take(var) {
            *dst = t;
        }
    }
    Ok(())
}

/// One forward-gradient sample of the block weights; heads are left zero.
#[allow(clippy::too_many_arguments)]
fn forward_body<T: Scalar>(
    tape: &Tape<T>,
    trace: &MixerTrace,
    loss_vars: &[crate::autodiff::Var],
    params: &MixerParams<T>,
    cfg: &TrainConfig,
    target: Target,
    rng: &RngStream,
    n: usize,
) -> Result<MixerParams<T>> {
    let greedy = cfg.algo.greedy();
    let mut out = params.zeros_like();
    let slice_tangents = |tan: &crate::autodiff::Tangents<T>| -> Vec<Tensor<T>> {
        loss_vars
            .iter()
            .map(|&v| tan.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
            .collect()
    };
    // Global variants: one scalar tangent per example over every loss.
    let per_example = |slices: &[Tensor<T>]| -> Vec<T> {
        let mut tot = vec![T::zero(); n];
        for s in slices {
            let per = s.len() / n;
            for (t, row) in tot.iter_mut().zip(s.data().chunks(per)) {
                *t = *t + row.iter().copied().sum::<T>();
            }
        }
        tot
    };
    match target {
        Target::Activities => {
            let sites: Vec<Site> = trace
                .sites
                .iter()
                .enumerate()
                .map(|(i, s)| Site::new(format!("site{i}"), tape.shape(s.output)[1..].to_vec()))
                .collect();
            let plan = PerturbationPlan::new(Target::Activities, cfg.sharing, sites).with_relu_masking(cfg.relu_masking);
            let mut us: Vec<Tensor<T>> = make_batch_perturbations(&plan, rng, n);
            if cfg.relu_masking {
                for (u, s) in us.iter_mut().zip(&trace.sites) {
                    apply_relu_mask(u, &s.mask_source(tape)?)?;
                }
            }
            let seeds: Vec<_> = trace.sites.iter().zip(&us).map(|(s, u)| (s.output, u.clone())).collect();
            let tan = tape.jvp(&seeds)?;
            let slices = slice_tangents(&tan);
            let total = (!greedy).then(|| per_example(&slices));
            for (site, u) in trace.sites.iter().zip(us) {
                let scaled = match &total {
                    Some(tot) => {
                        let per = u.len() / n;
                        Tensor::from_fn(u.shape().to_vec(), |i| u.data()[i] * tot[i / per])
                    }
                    None => u.mul(&expand_slices(site.kind, &slices[site.block], u.shape())?)?,
                };
                let g = site_param_grad(site.kind, tape.value(site.input), &scaled, n)?;
                add_affine(block_affine_mut(&mut out, site.block, site.kind), &g)?;
            }
        }
        Target::Weights => {
            let layout = body_layout(params);
            let named = params.named_tensors();
            let sites: Vec<Site> = named[..2 * layout.len()].iter().map(|(name, t)| Site::new(name.clone(), t.shape().to_vec())).collect();
            let plan = PerturbationPlan::new(Target::Weights, Sharing::Shared, sites);
            plan.validate_for_training()?;
            let vs: Vec<Tensor<T>> = make_batch_perturbations(&plan, rng, n);
            let vars = trace.params.all();
            let seeds: Vec<_> = vars.iter().zip(&vs).map(|(&v, t)| (v, t.clone())).collect();
            let tan = tape.jvp(&seeds)?;
            let slices = slice_tangents(&tan);
            let inv = T::one() / T::from_usize(n).unwrap();
            let global = (!greedy).then(|| per_example(&slices).into_iter().fold(T::zero(), |a, t| a + t) * inv);
            for (li, &(block, kind)) in layout.iter().enumerate() {
                let (vw, vb) = (&vs[2 * li], &vs[2 * li + 1]);
                let dst = block_affine_mut(&mut out, block, kind);
                match (global, kind) {
                    (Some(d), _) => {
                        dst.w = vw.scale(d);
                        dst.b = vb.scale(d);
                    }
                    (None, SiteKind::Grouped) => {
                        // Group g's weights only reach the slices of group g.
                        let s = &slices[block];
                        let groups = s.shape()[2];
                        let mut d = vec![T::zero(); groups];
                        for (i, &t) in s.data().iter().enumerate() {
                            d[i % groups] = d[i % groups] + t;
                        }
                                let d: Vec<T> = d.into_iter().map(|x| x * inv).collect();
                        let dw = vw.len() / groups;
                        let db = vb.len() / groups;
                        dst.w = Tensor::from_fn(vw.shape().to_vec(), |i| vw.data()[i] * d[i / dw]);
                        dst.b = Tensor::from_fn(vb.shape().to_vec(), |i| vb.data()[i] * d[i / db]);
                    }
                    (None, _) => {
                        let d = slices[block].data().iter().fold(T::zero(), |a, &t| a + t) * inv;
                        dst.w = vw.scale(d);
                        dst.b = vb.scale(d);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Standardizes pixels and pads images to the model's input size.
pub fn prepare(data: &Dataset, mixer: &MixerConfig, mean: f32, std: f32) -> Result<Dataset> {
    let (h, w, c) = data.image_shape();
    if c != mixer.in_channels {
        return Err(Error::Config(format!("{c}-channel images for a {}-channel model", mixer.in_channels)));
    }
    let mut out = data.clone();
    if (h, w) != (mixer.height, mixer.width) {
        out.images = pad_images(&data.images, mixer.height, mixer.width)?;
    }
    out.standardize(mean, std);
    Ok(out)
}

/// Top-1 error in percent of the classifier on a prepared dataset.
pub fn evaluate(params: &MixerParams<f32>, data: &Dataset, opts: ForwardOptions) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for batch in sequential_batches(data, 500) {
        let tokens = patchify(&batch.images, params.config.side)?;
        let (logits, _) = full_forward(params, &tokens, opts)?;
        correct += count_correct(&logits, &batch.one_hot);
    }
    Ok(100.0 * (1.0 - correct as f64 / data.len() as f64))
}

/// Parameters, momentum buffers and the step counter.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: MixerParams<f32>,
    velocity: MixerParams<f32>,
    pub step: usize,
    pub total_steps: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, mixer: &MixerConfig, steps_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let params = MixerParams::init(mixer, cfg.seed)?;
        Ok(Self::from_params(cfg, params, steps_per_epoch))
    }

    pub fn from_params(cfg: TrainConfig, params: MixerParams<f32>, steps_per_epoch: usize) -> Self {
        let velocity = params.zeros_like();
        let total_steps = (cfg.epochs * steps_per_epoch).max(1);
        Trainer { cfg, params, velocity, step: 0, total_steps }
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(self.cfg.schedule, self.step.min(self.total_steps), self.total_steps, self.cfg.lr, self.cfg.warmup_steps)
    }

    /// One update on prepared images `[B, H, W, C]` with one-hot labels.
    pub fn train_step(&mut self, images: &Tensor<f32>, one_hot: &Tensor<f32>) -> Result<StepStats> {
        let tokens = patchify(images, self.params.config.side)?;
        let rng = RngStream::new(self.cfg.seed, PERTURB_STREAM).derive(self.step as u64);
        let (grads, stats) = match estimate_gradients(&self.params, &tokens, one_hot, &self.cfg, &rng) {
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step: self.step, loss: f64::NAN }),
            r => r?,
        };
        let lr = self.current_lr();
        let g: Vec<&Tensor<f32>> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
        sgd_update(&mut self.params.tensors_mut(), &mut self.velocity.tensors_mut(), &g, lr, self.cfg.momentum)?;
        if !self.params.all_finite() {
            return Err(Error::Diverged { step: self.step, loss: stats.loss });
        }
        self.step += 1;
        Ok(stats)
    }

    /// One epoch over a prepared dataset; returns `(train error %, mean loss)`.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<(f64, f64)> {
        let (mut correct, mut count, mut loss_sum, mut batches_seen) = (0, 0, 0.0, 0);
        for batch in batches(data, self.cfg.batch_size, self.cfg.seed, epoch as u64, false) {
            let s = self.train_step(&batch.images, &batch.one_hot)?;
            correct += s.correct;
            count += s.count;
            loss_sum += s.loss;
            batches_seen += 1;
        }
        Ok((100.0 * (1.0 - correct as f64 / count.max(1) as f64), loss_sum / batches_seen.max(1) as f64))
    }
}

/// Final state of a [`train`] run.
pub struct TrainOutcome {
    pub params: MixerParams<f32>,
    pub records: Vec<MetricsRecord>,
    /// Full-split errors of the final parameters.
    pub final_train_err: f64,
    pub final_test_err: f64,
}

/// Whether `seconds` in metrics is wall-clock time or fixed at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Timing {
    #[default]
    Wall,
    Off,
}

/// Full training run on raw `[0, 1]` datasets. `on_epoch` sees every record.
pub fn train(
    cfg: &TrainConfig,
    train_raw: &Dataset,
    test_raw: &Dataset,
    input: crate::mixer::InputShape,
    timing: Timing,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let mixer = MixerConfig::preset(cfg.preset, input);
    let train_d = prepare(train_raw, &mixer, cfg.pixel_mean, cfg.pixel_std)?;
    let test_d = prepare(test_raw, &mixer, cfg.pixel_mean, cfg.pixel_std)?;
    let steps = train_d.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(cfg.clone(), &mixer, steps)?;
    let opts = cfg.forward_options();
    let start = Instant::now();
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = trainer.current_lr();
        let (train_err, loss) = trainer.train_epoch(&train_d, epoch)?;
        let test_err = evaluate(&trainer.params, &test_d, opts)?;
        let seconds = match timing {
            Timing::Wall => start.elapsed().as_secs_f64(),
            Timing::Off => 0.0,
        };
        let rec = MetricsRecord { epoch: epoch + 1, train_err, test_err, loss, lr, seconds };
        on_epoch(&rec);
        records.push(rec);
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                trainer.params.save(&dir.join(format!("epoch{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    let final_train_err = evaluate(&trainer.params, &train_d, opts)?;
    let final_test_err = match records.last() {
        Some(r) => r.test_err,
        None => evaluate(&trainer.params, &test_d, opts)?,
    };
    Ok(TrainOutcome { params: trainer.params, records, final_train_err, final_test_err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::mixer::InputShape;

    fn tiny(blocks: usize, side: usize, channels: usize, groups: usize) -> MixerConfig {
        MixerConfig { blocks, side, channels, groups, num_classes: 3, height: 4, width: 4, in_channels: 1 }
    }

    fn batch(cfg: &MixerConfig, n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = RngStream::new(seed, 3);
        let x = rng.standard_normal([n, cfg.patches(), cfg.patch_dim()]);
        let labels: Vec<u8> = (0..n).map(|_| rng.below(cfg.num_classes) as u8).collect();
        (x, crate::losses::one_hot(&labels, cfg.num_classes))
    }

    #[test]
    fn algo_names_round_trip() {
        for a in Algo::ALL {
            assert_eq!(a.id().parse::<Algo>().unwrap(), a);
        }
        assert!("unknown".parse::<Algo>().is_err());
    }

    #[test]
    fn linear_schedule_endpoints() {
        assert_eq!(lr_at(Schedule::Linear, 0, 100, 0.01, 0), 0.01);
        assert_eq!(lr_at(Schedule::Linear, 100, 100, 0.01, 0), 0.0);
        let lrs: Vec<f64> = (0..=100).map(|s| lr_at(Schedule::Linear, s, 100, 0.01, 0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn cosine_schedule_shape() {
        assert_eq!(lr_at(Schedule::Cosine, 0, 110, 0.05, 10), 0.0);
        assert!((lr_at(Schedule::Cosine, 5, 110, 0.05, 10) - 0.025).abs() < 1e-15);
        assert_eq!(lr_at(Schedule::Cosine, 10, 110, 0.05, 10), 0.05);
        assert!((lr_at(Schedule::Cosine, 60, 110, 0.05, 10) - 0.025).abs() < 1e-12);
        assert!(lr_at(Schedule::Cosine, 110, 110, 0.05, 10).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_velocity() {
        let mut p = [Tensor::<f64>::full([3], 1.0)];
        let mut v = [Tensor::<f64>::zeros([3])];
        let g = Tensor::<f64>::zeros([3]);
        {
            let (mut pr, mut vr): (Vec<_>, Vec<_>) = (p.iter_mut().collect(), v.iter_mut().collect());
            sgd_update(&mut pr, &mut vr, &[&g], 0.1, 0.9).unwrap();
        }
        assert_eq!(p[0].data(), [1.0; 3]);
        v[0] = Tensor::full([3], 2.0);
        {
            let (mut pr, mut vr): (Vec<_>, Vec<_>) = (p.iter_mut().collect(), v.iter_mut().collect());
            sgd_update(&mut pr, &mut vr, &[&g], 0.1, 0.5).unwrap();
        }
        assert_eq!(v[0].data(), [1.0; 3]);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
    }

    /// Solves the normal equations by Gaussian elimination.
    fn least_squares(x: &Tensor<f64>, y: &Tensor<f64>) -> Vec<f64> {
        let xtx = x.matmul_tn(x).unwrap();
        let xty = x.matmul_tn(y).unwrap();
        let d = xtx.shape()[0];
        let mut a: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut row = xtx.data()[i * d..(i + 1) * d].to_vec();
                row.push(xty.data()[i]);
                row
            })
            .collect();
        for c in 0..d {
            let piv = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for r in 0..d {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..=d {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        (0..d).map(|i| a[i][d] / a[i][i]).collect()
    }

    #[test]
    fn backprop_linear_regression_reaches_normal_equations() {
        let mut rng = RngStream::new(4, 0);
        let x: Tensor<f64> = rng.standard_normal([64, 4]);
        let y: Tensor<f64> = rng.standard_normal([64, 1]);
        let opt = least_squares(&x, &y);
        let mut w = Tensor::<f64>::zeros([4, 1]);
        let mut v = Tensor::<f64>::zeros([4, 1]);
        for _ in 0..1000 {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.variable(w.clone());
            let yv = tape.constant(y.clone());
            let pred = tape.linear(xv, wv, None).unwrap();
            let r = tape.sub(pred, yv).unwrap();
            let sq = tape.square(r);
            let loss = tape.mean(sq);
            let g = tape.backward(loss, Tensor::scalar(1.0)).unwrap().take(wv).unwrap();
            sgd_update(&mut [&mut w], &mut [&mut v], &[&g], 0.1, 0.9).unwrap();
        }
        for (a, b) in w.data().iter().zip(&opt) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    fn flat_body(p: &MixerParams<f64>) -> Vec<f64> {
        let heads = 2 * p.proj.len() + 2;
        let named = p.named_tensors();
        named[..named.len() - heads].iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Mean of `samples` forward-gradient estimates against the exact
    /// gradient of the same objective.
    fn mean_alignment(cfg_m: &MixerConfig, algo: Algo, reference: Algo, sharing: Sharing, samples: usize) -> (f64, f64) {
        let params = MixerParams::<f64>::init(cfg_m, 21).unwrap();
        let (x, y) = batch(cfg_m, 6, 2);
        let cfg = TrainConfig { algo, sharing, relu_masking: false, ..Default::default() };
        let mut mean = vec![0.0; params.body_params()];
        for s in 0..samples {
            let (g, _) = estimate_gradients(&params, &x, &y, &cfg, &RngStream::new(s as u64, 9)).unwrap();
            for (m, v) in mean.iter_mut().zip(flat_body(&g)) {
                *m += v / samples as f64;
            }
        }
        let rcfg = TrainConfig { algo: reference, ..cfg };
        let exact = flat_body(&estimate_gradients(&params, &x, &y, &rcfg, &RngStream::new(0, 0)).unwrap().0);
        let rel = mean.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            / exact.iter().map(|b| b * b).sum::<f64>().sqrt();
        (cosine(&mean, &exact), rel)
    }

    #[test]
    fn greedy_activity_estimate_is_unbiased_without_groups() {
        // One patch, one group: each block has a single local loss, so the
        // greedy estimate targets the greedy backprop gradient exactly.
        let cfg = tiny(2, 1, 6, 1);
        let (cos, rel) = mean_alignment(&cfg, Algo::LgFgA, Algo::LgBp, Sharing::Independent, 3000);
        assert!(cos > 0.99 && rel < 0.15, "cos {cos} rel {rel}");
    }

    #[test]
    fn global_estimates_target_the_summed_local_losses() {
        // Exact reference: the greedy backprop gradient equals the gradient of
        // the summed local losses when there is a single block.
        let cfg = tiny(1, 2, 4, 2);
        for (algo, samples) in [(Algo::FgA, 3000), (Algo::FgW, 6000)] {
            let (cos, rel) = mean_alignment(&cfg, algo, Algo::LgBp, Sharing::Independent, samples);
            assert!(cos > 0.95, "{algo}: cos {cos} rel {rel}");
        }
    }

    #[test]
    fn shared_activity_perturbation_is_unbiased_too() {
        let cfg = tiny(1, 1, 6, 1);
        let (cos, rel) = mean_alignment(&cfg, Algo::FgA, Algo::LgBp, Sharing::Shared, 3000);
        assert!(cos > 0.98, "cos {cos} rel {rel}");
    }

    #[test]
    fn greedy_bp_and_bp_agree_on_primal_losses() {
        let cfg = tiny(3, 2, 4, 2);
        let params = MixerParams::<f64>::init(&cfg, 1).unwrap();
        let (x, y) = batch(&cfg, 5, 1);
        let rng = RngStream::new(0, 0);
        let a = estimate_gradients(&params, &x, &y, &TrainConfig { algo: Algo::Bp, ..Default::default() }, &rng).unwrap().1;
        let b = estimate_gradients(&params, &x, &y, &TrainConfig { algo: Algo::LgBp, ..Default::default() }, &rng).unwrap().1;
        assert_eq!(a, b);
    }

    #[test]
    fn bp_matches_finite_differences_on_a_body_weight() {
        let cfg = tiny(2, 2, 4, 2);
        let params = MixerParams::<f64>::init(&cfg, 6).unwrap();
        let (x, y) = batch(&cfg, 4, 3);
        let tc = TrainConfig { algo: Algo::Bp, ..Default::default() };
        let (g, _) = estimate_gradients(&params, &x, &y, &tc, &RngStream::new(0, 0)).unwrap();
        let loss = |p: &MixerParams<f64>| estimate_gradients(p, &x, &y, &tc, &RngStream::new(0, 0)).unwrap().1.loss;
        for (idx, h) in [(0usize, 1e-5), (7, 1e-5)] {
            let mut plus = params.clone();
            plus.blocks[1].dense.w.data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.blocks[1].dense.w.data_mut()[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = g.blocks[1].dense.w.data()[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }

    #[test]
    fn single_loss_config_makes_greedy_and_global_identical() {
        let cfg = tiny(1, 1, 6, 1);
        let params = MixerParams::<f64>::init(&cfg, 2).unwrap();
        let (x, y) = batch(&cfg, 5, 7);
        let rng = RngStream::new(3, 3);
        for (a, b) in [(Algo::FgA, Algo::LgFgA), (Algo::FgW, Algo::LgFgW)] {
            let ga = estimate_gradients(&params, &x, &y, &TrainConfig { algo: a, ..Default::default() }, &rng).unwrap().0;
            let gb = estimate_gradients(&params, &x, &y, &TrainConfig { algo: b, ..Default::default() }, &rng).unwrap().0;
            assert_eq!(ga, gb);
        }
    }

    #[test]
    fn greedy_estimates_ignore_later_losses() {
        // In greedy mode, block 0's estimate depends only on block 0's loss:
        // replacing block 1's projector changes nothing upstream.
        let cfg = tiny(2, 2, 4, 2);
        let params = MixerParams::<f64>::init(&cfg, 3).unwrap();
        let mut other = params.clone();
        other.proj[1].w = other.proj[1].w.scale(-3.0);
        let (x, y) = batch(&cfg, 4, 8);
        let tc = TrainConfig { algo: Algo::LgFgA, ..Default::default() };
        let rng = RngStream::new(1, 2);
        let a = estimate_gradients(&params, &x, &y, &tc, &rng).unwrap().0;
        let b = estimate_gradients(&other, &x, &y, &tc, &rng).unwrap().0;
        assert_eq!(a.blocks[0], b.blocks[0]);
        assert_ne!(a.blocks[1], b.blocks[1]);
    }

    #[test]
    fn relu_masking_zeroes_dead_unit_updates() {
        // A unit whose ReLU is off for every example gets no dense-layer
        // bias update under masking.
        let cfg = tiny(1, 1, 6, 1);
        let params = MixerParams::<f64>::init(&cfg, 5).unwrap();
        let (x, y) = batch(&cfg, 1, 4);
        let tc = TrainConfig { algo: Algo::FgA, relu_masking: true, ..Default::default() };
        let mut tape = Tape::<f64>::new();
        let trace = build_forward(&mut tape, &params, x.clone(), false, tc.forward_options()).unwrap();
        let dead: Vec<usize> = trace.sites[0].mask_source(&tape).unwrap().data().iter().enumerate().filter(|(_, &v)| v <= 0.0).map(|(i, _)| i).collect();
        assert!(!dead.is_empty());
        let g = estimate_gradients(&params, &x, &y, &tc, &RngStream::new(0, 1)).unwrap().0;
        for i in dead {
            assert_eq!(g.blocks[0].dense.b.data()[i], 0.0);
        }
    }

    #[test]
    fn untrained_model_is_at_chance_on_random_labels() {
        let mixer = MixerConfig::preset(Preset::S1_1, InputShape::MNIST);
        let params = MixerParams::<f32>::init(&mixer, 0).unwrap();
        let mut rng = RngStream::new(1, 0);
        let data = Dataset {
            images: rng.uniform_tensor([10000, 28, 28, 1], 1.0).map(|v: f32| v.abs()),
            labels: (0..10000).map(|_| rng.below(10) as u8).collect(),
            classes: 10,
            split: Split::Test,
        };
        let d = prepare(&data, &mixer, 0.1307, 0.3081).unwrap();
        let e1 = evaluate(&params, &d, ForwardOptions::default()).unwrap();
        let e2 = evaluate(&params, &d, ForwardOptions::default()).unwrap();
        assert_eq!(e1, e2);
        assert!((e1 - 90.0).abs() < 2.0, "{e1}");
    }

    #[test]
    fn memorizes_ten_examples() {
        let mixer = MixerConfig { blocks: 1, side: 1, channels: 32, groups: 1, num_classes: 10, height: 4, width: 4, in_channels: 1 };
        let mut rng = RngStream::new(2, 0);
        let data = Dataset {
            images: rng.uniform_tensor([10, 4, 4, 1], 1.0),
            labels: (0..10).collect(),
            classes: 10,
            split: Split::Train,
        };
        let cfg = TrainConfig { algo: Algo::Bp, batch_size: 10, lr: 0.1, epochs: 200, ..Default::default() };
        let mut t = Trainer::new(cfg, &mixer, 1).unwrap();
        for e in 0..200 {
            t.train_epoch(&data, e).unwrap();
        }
        assert_eq!(evaluate(&t.params, &data, ForwardOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn divergence_is_reported() {
        let mixer = MixerConfig { blocks: 1, side: 1, channels: 8, groups: 1, num_classes: 10, height: 4, width: 4, in_channels: 1 };
        let mut rng = RngStream::new(2, 0);
        let mut images: Tensor<f32> = rng.uniform_tensor([10, 4, 4, 1], 1.0);
        images.data_mut()[3] = f32::INFINITY;
        let labels = crate::losses::one_hot::<f32>(&(0..10).collect::<Vec<u8>>(), 10);
        let cfg = TrainConfig { algo: Algo::Bp, ..Default::default() };
        let mut t = Trainer::new(cfg, &mixer, 1).unwrap();
        let mut err = None;
        for _ in 0..5 {
            if let Err(e) = t.train_step(&images, &labels) {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(Error::Diverged { .. })), "{err:?}");
    }
}
