//! Monte-Carlo checks of forward-gradient variance on a micro-network.
//!
//! The network is `p`-`q`-1 with a tanh (or ReLU) hidden layer, a linear
//! output and squared error `(y - t)²`. Inputs and targets are iid N(0, 1).
//! Estimators are measured on the first-layer weight matrix `[p, q]`:
//!
//! | estimator | shared | independent |
//! |---|---|---|
//! | weight perturbed | `(pq+2)/N·V + (pq+1)·S` | `(pq+2)/N·V + (pq+1)/N·S` |
//! | activity perturbed | `(q+2)/N·V + (q+1)·S` | `(q+2)/N·V + (q+1)/N·S` |
//! | backprop | `V/N` | `V/N` |
//!
//! `V` is the coordinate-averaged per-example gradient variance and `S` the
//! coordinate-averaged squared mean gradient. Both come from exact
//! per-example gradients ([`oracle_vs`]). The formulas are exact for Gaussian
//! perturbations and any data distribution.
//!
//! Everything here is double precision and hand-coded: the forward pass, the
//! tangent pass used by the estimators and the backprop oracle.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::perturb::Sharing;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// `p`-`q`-1 network. `w1[i * q + j]` connects input `i` to hidden unit `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroNet {
    pub p: usize,
    pub q: usize,
    pub act: Activation,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Exact per-example gradient of the squared error.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MicroGrad {
    /// Flattened `[w1, b1, w2, b2]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w1.clone();
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }
}

struct Hidden {
    z: Vec<f64>,
    h: Vec<f64>,
    /// Activation derivative at `z`.
    dh: Vec<f64>,
    y: f64,
}

impl MicroNet {
    /// Fixed random weights: `w1 ~ N(0, 1/p)`, `w2 ~ N(0, 1/q)`, biases `N(0, 0.1²)`.
    pub fn random(p: usize, q: usize, act: Activation, seed: u64) -> Self {
        let mut rng = RngStream::new(seed, 0x6d69_6372);
        let s1 = 1.0 / (p as f64).sqrt();
        let s2 = 1.0 / (q as f64).sqrt();
        MicroNet {
            p,
            q,
            act,
            w1: (0..p * q).map(|_| rng.normal() * s1).collect(),
            b1: (0..q).map(|_| rng.normal() * 0.1).collect(),
            w2: (0..q).map(|_| rng.normal() * s2).collect(),
            b2: rng.normal() * 0.1,
        }
    }

    /// The 4-4-1 tanh network.
    pub fn four_four_one(seed: u64) -> Self {
        MicroNet::random(4, 4, Activation::Tanh, seed)
    }

    pub fn num_params(&self) -> usize {
        self.p * self.q + 2 * self.q + 1
    }

    fn hidden(&self, x: &[f64]) -> Hidden {
        let q = self.q;
        let mut z = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            for (zj, &w) in z.iter_mut().zip(&self.w1[i * q..(i + 1) * q]) {
                *zj += xi * w;
            }
        }
        let (h, dh): (Vec<f64>, Vec<f64>) = match self.act {
            Activation::Tanh => z.iter().map(|&v| {
                let t = v.tanh();
                (t, 1.0 - t * t)
            }).unzip(),
            Activation::Relu => z.iter().map(|&v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) }).unzip(),
        };
        let y = self.b2 + h.iter().zip(&self.w2).map(|(a, b)| a * b).sum::<f64>();
        Hidden { z, h, dh, y }
    }

    pub fn output(&self, x: &[f64]) -> f64 {
        self.hidden(x).y
    }

    pub fn loss(&self, x: &[f64], t: f64) -> f64 {
        (self.output(x) - t).powi(2)
    }

    /// Reverse-mode gradient.
    pub fn grad(&self, x: &[f64], t: f64) -> MicroGrad {
        let hd = self.hidden(x);
        let dy = 2.0 * (hd.y - t);
        let dz: Vec<f64> = (0..self.q).map(|j| dy * self.w2[j] * hd.dh[j]).collect();
        let mut w1 = vec![0.0; self.p * self.q];
        for (i, &xi) in x.iter().enumerate() {
            for (g, &d) in w1[i * self.q..(i + 1) * self.q].iter_mut().zip(&dz) {
                *g = xi * d;
            }
        }
        MicroGrad { w1, b1: dz, w2: hd.h.iter().map(|h| dy * h).collect(), b2: dy }
    }

    /// Loss tangent along a parameter direction laid out like [`MicroGrad::flatten`].
    pub fn jvp_params(&self, x: &[f64], t: f64, v: &[f64]) -> f64 {
        let (p, q) = (self.p, self.q);
        let hd = self.hidden(x);
        let (vw1, rest) = v.split_at(p * q);
        let (vb1, rest) = rest.split_at(q);
        let (vw2, vb2) = rest.split_at(q);
        let mut dz = vb1.to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (d, &w) in dz.iter_mut().zip(&vw1[i * q..(i + 1) * q]) {
                *d += xi * w;
            }
        }
        let dy: f64 = (0..q).map(|j| self.w2[j] * hd.dh[j] * dz[j] + vw2[j] * hd.h[j]).sum::<f64>() + vb2[0];
        2.0 * (hd.y - t) * dy
    }
}

/// Which parameters an estimate covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// The first-layer weight matrix only (the variance formulas' setting).
    FirstLayer,
    /// Every parameter; activity perturbations at both layer outputs.
    AllParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Backprop,
    Weight,
    Activity,
}

impl Estimator {
    pub fn id(self) -> &'static str {
        match self {
            Estimator::Backprop => "bp",
            Estimator::Weight => "g_w",
            Estimator::Activity => "g_a",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Full estimator configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub estimator: Estimator,
    pub sharing: Sharing,
    pub scope: Scope,
    /// Zero perturbations on hidden units whose pre-activation is `<= 0`.
    pub relu_masking: bool,
}

impl EstimatorSpec {
    pub fn new(estimator: Estimator, sharing: Sharing) -> Self {
        EstimatorSpec { estimator, sharing, scope: Scope::FirstLayer, relu_masking: false }
    }
}

/// Coordinate count covered by `scope`.
pub fn scope_len(net: &MicroNet, scope: Scope) -> usize {
    match scope {
        Scope::FirstLayer => net.p * net.q,
        Scope::AllParams => net.num_params(),
    }
}

/// A batch of iid N(0, 1) inputs `[n, p]` and targets `[n]`.
pub fn sample_batch(p: usize, n: usize, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let xs = (0..n * p).map(|_| rng.normal()).collect();
    let ts = (0..n).map(|_| rng.normal()).collect();
    (xs, ts)
}

/// Per-example estimates for one batch. Shared perturbations are drawn once.
///
/// Returns the per-example estimates `[n, dim]` row-major.
fn per_example_estimates(
    net: &MicroNet,
    spec: &EstimatorSpec,
    xs: &[f64],
    ts: &[f64],
    rng: &mut RngStream,
) -> Vec<f64> {
    let (p, q) = (net.p, net.q);
    let n = ts.len();
    let dim = scope_len(net, spec.scope);
    let nparams = net.num_params();
    let mut out = vec![0.0; n * dim];
    // Perturbation dimension: weights use the scope's coordinates; activities
    // use q hidden units, plus the output unit for AllParams.
    let pdim = match spec.estimator {
        Estimator::Backprop => 0,
        Estimator::Weight => dim,
        Estimator::Activity => match spec.scope {
            Scope::FirstLayer => q,
            Scope::AllParams => q + 1,
        },
    };
    let mut shared = Vec::new();
    if spec.sharing == Sharing::Shared {
        shared = (0..pdim).map(|_| rng.normal()).collect();
    }
    let mut vfull = vec![0.0; nparams];
    for ni in 0..n {
        let x = &xs[ni * p..(ni + 1) * p];
        let t = ts[ni];
        let row = &mut out[ni * dim..(ni + 1) * dim];
        if spec.estimator == Estimator::Backprop {
            let g = net.grad(x, t);
            match spec.scope {
                Scope::FirstLayer => row.copy_from_slice(&g.w1),
                Scope::AllParams => row.copy_from_slice(&g.flatten()),
            }
            continue;
        }
        let fresh: Vec<f64>;
        let pert: &[f64] = if spec.sharing == Sharing::Shared {
            &shared
        } else {
            fresh = (0..pdim).map(|_| rng.normal()).collect();
            &fresh
        };
        let hd = net.hidden(x);
        let live = |j: usize| !spec.relu_masking || hd.z[j] > 0.0;
        match spec.estimator {
            Estimator::Weight => {
                vfull.iter_mut().for_each(|v| *v = 0.0);
                vfull[..dim].copy_from_slice(pert);
                let dot = net.jvp_params(x, t, &vfull);
                for (k, (o, &v)) in row.iter_mut().zip(pert).enumerate() {
                    // Unit index of coordinate k, for masking w1 columns and b1.
                    let unit = if k < p * q {
                        Some(k % q)
                    } else if k < p * q + q {
                        Some(k - p * q)
                    } else {
                        None
                    };
                    let keep = unit.map_or(true, live);
                    *o = if keep { dot * v } else { 0.0 };
                }
            }
            Estimator::Activity => {
                let u: Vec<f64> = (0..q).map(|j| if live(j) { pert[j] } else { 0.0 }).collect();
                let u2 = if spec.scope == Scope::AllParams { pert[q] } else { 0.0 };
                // Tangent pass with u injected at z1 (and u2 at the output).
                let dy: f64 = (0..q).map(|j| net.w2[j] * hd.dh[j] * u[j]).sum::<f64>() + u2;
                let dl = 2.0 * (hd.y - t) * dy;
                for i in 0..p {
                    for j in 0..q {
                        row[i * q + j] = x[i] * dl * u[j];
                    }
                }
                if spec.scope == Scope::AllParams {
                    let base = p * q;
                    for j in 0..q {
                        row[base + j] = dl * u[j];
                        row[base + q + j] = hd.h[j] * dl * u2;
                    }
                    row[base + 2 * q] = dl * u2;
                }
            }
            Estimator::Backprop => unreachable!(),
        }
    }
    out
}

/// Batch-mean estimate over the scope's coordinates.
pub fn batch_estimate(net: &MicroNet, spec: &EstimatorSpec, xs: &[f64], ts: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let n = ts.len();
    let per = per_example_estimates(net, spec, xs, ts, rng);
    let dim = per.len() / n.max(1);
    let mut g = vec![0.0; dim];
    for row in per.chunks(dim) {
        for (a, &b) in g.iter_mut().zip(row) {
            *a += b;
        }
    }
    g.iter_mut().for_each(|v| *v /= n as f64);
    g
}

/// Per-coordinate streaming mean and variance.
#[derive(Clone, Debug)]
pub struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let c = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / c;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased per-coordinate variances.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    pub fn mean_variance(&self) -> f64 {
        let v = self.variance();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Gradient statistics from exact per-example gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Oracle {
    /// Coordinate-averaged per-example gradient variance.
    pub v: f64,
    /// Coordinate-averaged squared mean gradient (bias-corrected).
    pub s: f64,
    /// Population mean gradient per coordinate.
    pub mean: Vec<f64>,
    pub samples: usize,
}

/// `V` and `S` over `scope` from `samples` fresh examples.
pub fn oracle_vs(net: &MicroNet, scope: Scope, samples: usize, rng: &mut RngStream) -> Oracle {
    let mut w = Welford::new(scope_len(net, scope));
    let mut x = vec![0.0; net.p];
    for _ in 0..samples {
        x.iter_mut().for_each(|v| *v = rng.normal());
        let t = rng.normal();
        let g = net.grad(&x, t);
        match scope {
            Scope::FirstLayer => w.push(&g.w1),
            Scope::AllParams => w.push(&g.flatten()),
        }
    }
    oracle_from(&w)
}

/// `V` and `S` over a fixed set of examples (`samples` = their count).
pub fn oracle_vs_fixed(net: &MicroNet, scope: Scope, xs: &[f64], ts: &[f64]) -> Oracle {
    let mut w = Welford::new(scope_len(net, scope));
    for (x, &t) in xs.chunks(net.p).zip(ts) {
        let g = net.grad(x, t);
        match scope {
            Scope::FirstLayer => w.push(&g.w1),
            Scope::AllParams => w.push(&g.flatten()),
        }
    }
    oracle_from(&w)
}

fn oracle_from(w: &Welford) -> Oracle {
    let n = w.count().max(1) as f64;
    let var = w.variance();
    let dim = var.len().max(1) as f64;
    let v = if w.count() < 2 { 0.0 } else { var.iter().sum::<f64>() / dim };
    // E[mean²] = mean² + Var/n, so subtract the sampling term.
    let s2 = w.mean().iter().map(|m| m * m).sum::<f64>() / dim;
    let s = (s2 - if w.count() < 2 { 0.0 } else { v / n }).max(0.0);
    Oracle { v, s, mean: w.mean().to_vec(), samples: w.count() }
}

/// Closed-form prediction of the coordinate-averaged variance.
pub fn theoretical_variance(est: Estimator, sharing: Sharing, n: usize, p: usize, q: usize, v: f64, s: f64) -> f64 {
    let n = n as f64;
    let k = match est {
        Estimator::Backprop => return v / n,
        Estimator::Weight => (p * q) as f64,
        Estimator::Activity => q as f64,
    };
    let s_term = (k + 1.0) * s;
    (k + 2.0) / n * v + if sharing == Sharing::Shared { s_term } else { s_term / n }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceReport {
    pub estimator: Estimator,
    /// `None` for backprop, which has no perturbation.
    pub sharing: Option<Sharing>,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub empirical: f64,
    pub theoretical: f64,
    pub v: f64,
    pub s: f64,
    pub trials: usize,
    pub rel_err: f64,
}

pub const CSV_HEADER: &str = "estimator,sharing,N,p,q,empirical,theoretical,rel_err";

impl VarianceReport {
    pub fn csv_row(&self) -> String {
        let sharing = self.sharing.map_or("none".to_string(), |s| s.to_string());
        format!(
            "{},{},{},{},{},{:.9e},{:.9e},{:.6}",
            self.estimator, sharing, self.n, self.p, self.q, self.empirical, self.theoretical, self.rel_err
        )
    }
}

pub fn write_csv(path: &Path, rows: &[VarianceReport]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Measured coordinate-averaged variance of one estimator at batch size `n`.
///
/// Every trial draws a fresh batch and fresh perturbations from
/// `RngStream::new(seed, ..).derive(trial)`.
pub fn empirical_variance(
    net: &MicroNet,
    spec: &EstimatorSpec,
    n: usize,
    trials: usize,
    seed: u64,
    oracle: &Oracle,
) -> VarianceReport {
    let root = RngStream::new(seed, 0x7661_7269);
    let mut w = Welford::new(scope_len(net, spec.scope));
    for trial in 0..trials {
        let mut rng = root.derive(trial as u64);
        let (xs, ts) = sample_batch(net.p, n, &mut rng);
        w.push(&batch_estimate(net, spec, &xs, &ts, &mut rng));
    }
    let empirical = w.mean_variance();
    let theoretical = theoretical_variance(spec.estimator, spec.sharing, n, net.p, net.q, oracle.v, oracle.s);
    VarianceReport {
        estimator: spec.estimator,
        sharing: (spec.estimator != Estimator::Backprop).then_some(spec.sharing),
        n,
        p: net.p,
        q: net.q,
        empirical,
        theoretical,
        v: oracle.v,
        s: oracle.s,
        trials,
        rel_err: (empirical - theoretical).abs() / theoretical,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Batch,
    FanIn,
    FanOut,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" | "batch" => Ok(SweepAxis::Batch),
            "p" | "fan-in" => Ok(SweepAxis::FanIn),
            "q" | "fan-out" => Ok(SweepAxis::FanOut),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?} (N | p | q)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    /// Largest swept value; the sweep covers the powers of two up to it.
    pub max: usize,
    /// Minimum trials per point.
    pub trials: usize,
    /// Points whose `N·p·q` is small get `work_budget / (N·p·q)` trials when
    /// that exceeds `trials`. Small batches have heavy-tailed estimates and
    /// need the extra samples; they are also the cheap ones.
    pub work_budget: usize,
    pub oracle_samples: usize,
    pub seed: u64,
    /// Batch size for the fan-in / fan-out sweeps.
    pub batch: usize,
    pub estimators: Vec<(Estimator, Sharing)>,
}

impl SweepConfig {
    pub fn new(axis: SweepAxis) -> Self {
        SweepConfig {
            axis,
            max: if axis == SweepAxis::Batch { 4096 } else { 256 },
            trials: 5000,
            work_budget: 16_000_000,
            oracle_samples: 200_000,
            seed: 0,
            batch: 4,
            estimators: vec![
                (Estimator::Weight, Sharing::Shared),
                (Estimator::Weight, Sharing::Independent),
                (Estimator::Activity, Sharing::Shared),
                (Estimator::Activity, Sharing::Independent),
                (Estimator::Backprop, Sharing::Independent),
            ],
        }
    }

    pub fn trials_for(&self, n: usize, p: usize, q: usize) -> usize {
        self.trials.max(self.work_budget / (n * p * q).max(1))
    }

    pub fn values(&self) -> Vec<usize> {
        std::iter::successors(Some(1usize), |v| v.checked_mul(2)).take_while(|&v| v <= self.max).collect()
    }
}

/// Runs the sweep. Rows are grouped by estimator in `cfg.estimators` order.
pub fn sweep(cfg: &SweepConfig) -> Vec<VarianceReport> {
    let values = cfg.values();
    let nets: Vec<(usize, MicroNet, Oracle)> = values
        .iter()
        .map(|&val| {
            let (p, q) = match cfg.axis {
                SweepAxis::Batch => (4, 4),
                SweepAxis::FanIn => (val, 4),
                SweepAxis::FanOut => (4, val),
            };
            let net = MicroNet::random(p, q, Activation::Tanh, cfg.seed ^ ((p as u64) << 32 | q as u64));
            let oracle = oracle_vs(&net, Scope::FirstLayer, cfg.oracle_samples, &mut RngStream::new(cfg.seed, 0x6f72_61));
            (val, net, oracle)
        })
        .collect();
    let mut rows = Vec::new();
    for (ei, &(est, sharing)) in cfg.estimators.iter().enumerate() {
        for (val, net, oracle) in &nets {
            let n = if cfg.axis == SweepAxis::Batch { *val } else { cfg.batch };
            let spec = EstimatorSpec::new(est, sharing);
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((ei as u64) << 20 | *val as u64);
            let trials = cfg.trials_for(n, net.p, net.q);
            rows.push(empirical_variance(net, &spec, n, trials, seed, oracle));
        }
    }
    rows
}

/// Split of the estimator variance into sampling, estimation and cross-example terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ZDecomposition {
    /// Data-sampling term `V / N` from the oracle.
    pub z1: f64,
    /// Mean per-example estimation variance, divided by `N`.
    pub z2: f64,
    /// Cross-example covariance of estimation errors, measured directly.
    pub z3: f64,
    /// Standard error of `z3`.
    pub z3_se: f64,
    /// `total - z1 - z2`.
    pub z3_residual: f64,
    /// Directly measured total variance.
    pub total: f64,
    pub trials: usize,
}

/// Splits the variance of `spec` at batch size `n`.
///
/// Per trial, `e_n = g_n - ∇_n` are the per-example estimation errors. The
/// Z2 sample is `Σ e_n² / N²` and the Z3 sample is `((Σ e_n)² - Σ e_n²) / N²`,
/// both averaged over coordinates.
pub fn decompose_z(
    net: &MicroNet,
    spec: &EstimatorSpec,
    n: usize,
    trials: usize,
    seed: u64,
    oracle: &Oracle,
) -> ZDecomposition {
    let root = RngStream::new(seed, 0x7a64_6563);
    let dim = scope_len(net, spec.scope);
    let mut total = Welford::new(dim);
    let mut z2 = Welford::new(1);
    let mut z3 = Welford::new(1);
    let nn = (n * n) as f64;
    for trial in 0..trials {
        let mut rng = root.derive(trial as u64);
        let (xs, ts) = sample_batch(net.p, n, &mut rng);
        let per = per_example_estimates(net, spec, &xs, &ts, &mut rng);
        let mut g = vec![0.0; dim];
        let mut esum = vec![0.0; dim];
        let mut esq = 0.0;
        for (ni, row) in per.chunks(dim).enumerate() {
            let grad = net.grad(&xs[ni * net.p..(ni + 1) * net.p], ts[ni]);
            let exact = match spec.scope {
                Scope::FirstLayer => grad.w1,
                Scope::AllParams => grad.flatten(),
            };
            for k in 0..dim {
                g[k] += row[k] / n as f64;
                let e = row[k] - exact[k];
                esum[k] += e;
                esq += e * e;
            }
        }
        total.push(&g);
        let cross = esum.iter().map(|e| e * e).sum::<f64>() - esq;
        z2.push(&[esq / (nn * dim as f64)]);
        z3.push(&[cross / (nn * dim as f64)]);
    }
    let total_v = total.mean_variance();
    let z1 = oracle.v / n as f64;
    let z2m = z2.mean()[0];
    ZDecomposition {
        z1,
        z2: z2m,
        z3: z3.mean()[0],
        z3_se: (z3.variance()[0] / trials as f64).sqrt(),
        z3_residual: total_v - z1 - z2m,
        total: total_v,
        trials,
    }
}

/// Worst per-coordinate z-score of the estimator mean against the exact
/// gradient on one fixed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub max_abs_z: f64,
    pub coords: usize,
    pub samples: usize,
    /// Coordinate-averaged variance of the estimate.
    pub mean_variance: f64,
}

pub fn bias_check(net: &MicroNet, spec: &EstimatorSpec, xs: &[f64], ts: &[f64], samples: usize, seed: u64) -> BiasReport {
    let dim = scope_len(net, spec.scope);
    let mut exact = vec![0.0; dim];
    for (x, &t) in xs.chunks(net.p).zip(ts) {
        let g = net.grad(x, t);
        let g = if spec.scope == Scope::FirstLayer { g.w1 } else { g.flatten() };
        for (a, b) in exact.iter_mut().zip(g) {
            *a += b / ts.len() as f64;
        }
    }
    let root = RngStream::new(seed, 0x6269_6173);
    let mut w = Welford::new(dim);
    for s in 0..samples {
        w.push(&batch_estimate(net, spec, xs, ts, &mut root.derive(s as u64)));
    }
    let var = w.variance();
    let mut max_abs_z: f64 = 0.0;
    for k in 0..dim {
        let se = (var[k] / samples as f64).sqrt();
        let diff = w.mean()[k] - exact[k];
        let z = if se == 0.0 {
            if diff.abs() < 1e-12 { 0.0 } else { f64::INFINITY }
        } else {
            diff / se
        };
        max_abs_z = max_abs_z.max(z.abs());
    }
    BiasReport { max_abs_z, coords: dim, samples, mean_variance: w.mean_variance() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn tape_grad(net: &MicroNet, x: &[f64], t: f64) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new([1, net.p], x.to_vec()).unwrap());
        let w1 = tape.variable(Tensor::new([net.p, net.q], net.w1.clone()).unwrap());
        let b1 = tape.variable(Tensor::new([net.q], net.b1.clone()).unwrap());
        let w2 = tape.variable(Tensor::new([net.q, 1], net.w2.clone()).unwrap());
        let b2 = tape.variable(Tensor::new([1], vec![net.b2]).unwrap());
        let z = tape.linear(xv, w1, Some(b1)).unwrap();
        let h = match net.act {
            Activation::Tanh => tape.tanh(z),
            Activation::Relu => tape.relu(z),
        };
        let y = tape.linear(h, w2, Some(b2)).unwrap();
        let tt = tape.constant(Tensor::new([1, 1], vec![t]).unwrap());
        let r = tape.sub(y, tt).unwrap();
        let sq = tape.square(r);
        let l = tape.sum(sq);
        let g = tape.backward(l, Tensor::scalar(1.0)).unwrap();
        let mut out = Vec::new();
        for v in [w1, b1, w2, b2] {
            out.extend_from_slice(g.get(v).unwrap().data());
        }
        out
    }

    #[test]
    fn hand_gradients_match_the_tape() {
        for act in [Activation::Tanh, Activation::Relu] {
            let net = MicroNet::random(4, 3, act, 11);
            let mut rng = RngStream::new(1, 0);
            for _ in 0..20 {
                let (x, t) = sample_batch(4, 1, &mut rng);
                let a = net.grad(&x, t[0]).flatten();
                let b = tape_grad(&net, &x, t[0]);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn jvp_is_gradient_dot_direction() {
        let net = MicroNet::four_four_one(3);
        let mut rng = RngStream::new(2, 0);
        let (x, t) = sample_batch(4, 1, &mut rng);
        let v: Vec<f64> = (0..net.num_params()).map(|_| rng.normal()).collect();
        let g = net.grad(&x, t[0]).flatten();
        let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((net.jvp_params(&x, t[0], &v) - dot).abs() < 1e-12);
    }

    #[test]
    fn single_fixed_input_has_zero_v() {
        let net = MicroNet::four_four_one(4);
        let xs = vec![0.3, -0.2, 1.1, 0.5];
        let o = oracle_vs_fixed(&net, Scope::FirstLayer, &xs.repeat(50), &[0.7; 50]);
        assert!(o.v < 1e-24);
    }

    #[test]
    fn zero_loss_network_has_zero_v_and_s() {
        let mut net = MicroNet::four_four_one(5);
        net.w2.iter_mut().for_each(|w| *w = 0.0);
        net.b2 = 0.0;
        // Targets equal the (zero) output, so every gradient vanishes.
        let mut rng = RngStream::new(6, 0);
        let (xs, _) = sample_batch(4, 200, &mut rng);
        let o = oracle_vs_fixed(&net, Scope::AllParams, &xs, &[0.0; 200]);
        assert_eq!((o.v, o.s), (0.0, 0.0));
    }

    #[test]
    fn backprop_variance_is_v_over_n() {
        let net = MicroNet::four_four_one(7);
        let oracle = oracle_vs(&net, Scope::FirstLayer, 100_000, &mut RngStream::new(8, 0));
        let spec = EstimatorSpec::new(Estimator::Backprop, Sharing::Independent);
        let r = empirical_variance(&net, &spec, 8, 5000, 9, &oracle);
        assert!(r.rel_err < 0.1, "{r:?}");
    }

    #[test]
    fn n1_cross_term_is_zero() {
        let net = MicroNet::four_four_one(10);
        let oracle = oracle_vs(&net, Scope::FirstLayer, 10_000, &mut RngStream::new(8, 0));
        let spec = EstimatorSpec::new(Estimator::Weight, Sharing::Shared);
        let z = decompose_z(&net, &spec, 1, 200, 3, &oracle);
        assert!(z.z3.abs() < 1e-15);
    }

    #[test]
    fn theory_formulas() {
        let (v, s) = (2.0, 0.5);
        assert_eq!(theoretical_variance(Estimator::Weight, Sharing::Shared, 4, 4, 4, v, s), 18.0 / 4.0 * 2.0 + 17.0 * 0.5);
        assert_eq!(theoretical_variance(Estimator::Weight, Sharing::Independent, 4, 4, 4, v, s), 9.0 + 17.0 * 0.5 / 4.0);
        assert_eq!(theoretical_variance(Estimator::Activity, Sharing::Shared, 2, 4, 4, v, s), 6.0 + 2.5);
        assert_eq!(theoretical_variance(Estimator::Activity, Sharing::Independent, 2, 4, 4, v, s), 6.0 + 1.25);
        assert_eq!(theoretical_variance(Estimator::Backprop, Sharing::Shared, 4, 4, 4, v, s), 0.5);
    }

    #[test]
    fn sweep_values_are_powers_of_two() {
        let cfg = SweepConfig::new(SweepAxis::Batch);
        assert_eq!(cfg.values().len(), 13);
        assert_eq!(*cfg.values().last().unwrap(), 4096);
        assert_eq!(SweepConfig::new(SweepAxis::FanIn).values().len(), 9);
    }
}
