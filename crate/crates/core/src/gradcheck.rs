//! Randomized oracle checks for the differentiation engine and the fused loss.
//!
//! Each check draws random shapes and inputs, compares the engine against an
//! independent oracle and reports the worst error seen. The `grad-check`
//! subcommand and the test suites share these routines.

use crate::autodiff::{NormGrad, Tape, Var};
use crate::error::Result;
use crate::losses::{aggregate_replicated, local_infonce, naive_local_xent, one_hot, pool_patches};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Step for central finite differences.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
pub const DUALITY_TOL: f64 = 1e-9;
pub const LINEARITY_TOL: f64 = 1e-10;
pub const FUSED_TOL_SINGLE: f64 = 1e-6;
pub const FUSED_TOL_DOUBLE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_err.is_finite() && self.max_err < self.tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub seed: u64,
    /// Run the fused-loss comparison in double precision with tighter tolerances.
    pub double: bool,
    /// Corrupt every engine tangent by a relative 1e-3. Exists to prove the checks can fail.
    pub inject_fault: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { trials: 100, seed: 0, double: false, inject_fault: false }
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
    fd: Fd,
}

/// How the finite-difference oracle relates to the engine tangent.
#[derive(Clone, Default)]
struct Fd {
    /// Inputs whose tangent is split across replicated `[N, P, G, ..]` slices.
    /// Their summed slice tangents equal the derivative of any single slice.
    split: Vec<usize>,
    /// Inputs behind a stop-gradient; never perturbed by the oracle.
    frozen: Vec<usize>,
    /// Function differentiated by finite differences when it differs from the
    /// recorded one, e.g. with stop-gradient branches replaced by constants.
    oracle: Option<std::rc::Rc<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>>,
}

fn case(inputs: Vec<Tensor<f64>>, build: Build) -> Case {
    Case { inputs, build, fd: Fd::default() }
}

/// Ops with a genuine derivative get the finite-difference check; the others
/// (stop-gradient, NG normalization) only the duality and linearity checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpCase {
    Linear,
    LinearBias,
    LinearWeight,
    GroupLinear,
    Normalize,
    NormalizeNoGrad,
    Relu,
    Tanh,
    Square,
    Reshape,
    SwapAxes,
    Add,
    Sub,
    Mul,
    Scale,
    MulConst,
    MeanAxis,
    BroadcastAxis,
    Sum,
    Mean,
    StopGradient,
    SoftmaxXent,
    FusedLocalXent,
    AggregateReplicated,
    NaiveLocalXent,
    InfoNce,
    InfoNceNoStopGrad,
    TanhMlp,
}

impl OpCase {
    pub const ALL: [OpCase; 28] = [
        OpCase::Linear,
        OpCase::LinearBias,
        OpCase::LinearWeight,
        OpCase::GroupLinear,
        OpCase::Normalize,
        OpCase::NormalizeNoGrad,
        OpCase::Relu,
        OpCase::Tanh,
        OpCase::Square,
        OpCase::Reshape,
        OpCase::SwapAxes,
        OpCase::Add,
        OpCase::Sub,
        OpCase::Mul,
        OpCase::Scale,
        OpCase::MulConst,
        OpCase::MeanAxis,
        OpCase::BroadcastAxis,
        OpCase::Sum,
        OpCase::Mean,
        OpCase::StopGradient,
        OpCase::SoftmaxXent,
        OpCase::FusedLocalXent,
        OpCase::AggregateReplicated,
        OpCase::NaiveLocalXent,
        OpCase::InfoNce,
        OpCase::InfoNceNoStopGrad,
        OpCase::TanhMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpCase::Linear => "linear",
            OpCase::LinearBias => "linear_bias",
            OpCase::LinearWeight => "linear_weight",
            OpCase::GroupLinear => "group_linear",
            OpCase::Normalize => "normalize",
            OpCase::NormalizeNoGrad => "normalize_ng",
            OpCase::Relu => "relu",
            OpCase::Tanh => "tanh",
            OpCase::Square => "square",
            OpCase::Reshape => "reshape",
            OpCase::SwapAxes => "swap_axes",
            OpCase::Add => "add",
            OpCase::Sub => "sub",
            OpCase::Mul => "mul",
            OpCase::Scale => "scale",
            OpCase::MulConst => "mul_const",
            OpCase::MeanAxis => "mean_axis",
            OpCase::BroadcastAxis => "broadcast_axis",
            OpCase::Sum => "sum",
            OpCase::Mean => "mean",
            OpCase::StopGradient => "stop_gradient",
            OpCase::SoftmaxXent => "softmax_xent",
            OpCase::FusedLocalXent => "fused_local_xent",
            OpCase::AggregateReplicated => "aggregate_replicated",
            OpCase::NaiveLocalXent => "naive_local_xent",
            OpCase::InfoNce => "infonce",
            OpCase::InfoNceNoStopGrad => "infonce_no_stop_grad",
            OpCase::TanhMlp => "tanh_mlp",
        }
    }

    fn differentiable(self) -> bool {
        !matches!(self, OpCase::StopGradient | OpCase::NormalizeNoGrad)
    }

    fn sample(self, rng: &mut RngStream) -> Case {
        let (a, b, c, d) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 2, 5));
        match self {
            OpCase::Linear => {
                let w = nrm(rng, &[c, d]);
                case(
                    vec![nrm(rng, &[a, b, c])],
                    Box::new(move |t, v| {
                        let w = t.constant(w.clone());
                        t.linear(v[0], w, None)
                    }),
                )
            }
            OpCase::LinearBias => case(
                vec![nrm(rng, &[a, b, c]), nrm(rng, &[c, d]), nrm(rng, &[d])],
                Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
            ),
            OpCase::LinearWeight => {
                let x = nrm(rng, &[a, b, c]);
                case(
                    vec![nrm(rng, &[c, d])],
                    Box::new(move |t, v| {
                        let x = t.constant(x.clone());
                        t.linear(x, v[0], None)
                    }),
                )
            }
            OpCase::GroupLinear => {
                let e = d + 1;
                case(
                    vec![nrm(rng, &[a, b, c, d]), nrm(rng, &[c, d, e]), nrm(rng, &[c, e])],
                    Box::new(|t, v| t.group_linear(v[0], v[1], Some(v[2]))),
                )
            }
            OpCase::Normalize | OpCase::NormalizeNoGrad => {
                let mode = if self == OpCase::Normalize { NormGrad::Exact } else { NormGrad::NoGrad };
                case(vec![nrm(rng, &[a, b, d + 1])], Box::new(move |t, v| Ok(t.normalize(v[0], mode))))
            }
            OpCase::Relu => {
                // Keep every coordinate at least 0.1 from the kink.
                let x = nrm(rng, &[a, b, d]).map(|z| z.signum() * (0.1 + z.abs()));
                case(vec![x], Box::new(|t, v| Ok(t.relu(v[0]))))
            }
            OpCase::Tanh => case(vec![nrm(rng, &[a, d])], Box::new(|t, v| Ok(t.tanh(v[0])))),
            OpCase::Square => case(vec![nrm(rng, &[a, d])], Box::new(|t, v| Ok(t.square(v[0])))),
            OpCase::Reshape => case(vec![nrm(rng, &[a, b, d])], Box::new(move |t, v| t.reshape(v[0], [a * b, d]))),
            OpCase::SwapAxes => {
                let (i, j) = (rng.below(3), rng.below(3));
                case(vec![nrm(rng, &[a, b, d])], Box::new(move |t, v| t.swap_axes(v[0], i, j)))
            }
            OpCase::Add | OpCase::Sub | OpCase::Mul => {
                let kind = self;
                case(
                    vec![nrm(rng, &[a, d]), nrm(rng, &[a, d])],
                    Box::new(move |t, v| match kind {
                        OpCase::Add => t.add(v[0], v[1]),
                        OpCase::Sub => t.sub(v[0], v[1]),
                        _ => t.mul(v[0], v[1]),
                    }),
                )
            }
            OpCase::Scale => {
                let s = rng.normal();
                case(vec![nrm(rng, &[a, d])], Box::new(move |t, v| Ok(t.scale(v[0], s))))
            }
            OpCase::MulConst => {
                let m = nrm(rng, &[a, d]);
                case(vec![nrm(rng, &[a, d])], Box::new(move |t, v| t.mul_const(v[0], m.clone())))
            }
            OpCase::MeanAxis => {
                let axis = rng.below(3);
                case(vec![nrm(rng, &[a, b, d])], Box::new(move |t, v| t.mean_axis(v[0], axis)))
            }
            OpCase::BroadcastAxis => {
                let axis = rng.below(3);
                case(
                    vec![nrm(rng, &[a, 1, d])],
                    Box::new(move |t, v| {
                        let x = if axis == 1 { v[0] } else { t.reshape(v[0], [a, d, 1])? };
                        let x = if axis == 0 { t.swap_axes(x, 0, 2)? } else { x };
                        t.broadcast_axis(x, axis, c + 1)
                    }),
                )
            }
            OpCase::Sum => case(vec![nrm(rng, &[a, b, d])], Box::new(|t, v| Ok(t.sum(v[0])))),
            OpCase::Mean => case(vec![nrm(rng, &[a, b, d])], Box::new(|t, v| Ok(t.mean(v[0])))),
            OpCase::StopGradient => case(vec![nrm(rng, &[a, d])], Box::new(|t, v| Ok(t.stop_gradient(v[0])))),
            OpCase::SoftmaxXent => {
                let labels: Vec<u8> = (0..a * b).map(|_| rng.below(d) as u8).collect();
                let y = one_hot::<f64>(&labels, d).into_reshape([a, b, d]).unwrap();
                case(vec![nrm(rng, &[a, b, d])], Box::new(move |t, v| t.softmax_xent(v[0], y.clone())))
            }
            OpCase::FusedLocalXent | OpCase::NaiveLocalXent => {
                let k = d;
                let (n, p, g, dd) = (a, b, c, dim(rng, 1, 3));
                let labels: Vec<u8> = (0..n).map(|_| rng.below(k) as u8).collect();
                let y = one_hot::<f64>(&labels, k);
                let fused = self == OpCase::FusedLocalXent;
                let mut cs = case(
                    vec![nrm(rng, &[n, p, g, dd]), nrm(rng, &[g * dd, k]), nrm(rng, &[k])],
                    Box::new(move |t, v| {
                        if fused {
                            t.fused_local_xent(v[0], v[1], v[2], y.clone())
                        } else {
                            naive_local_xent(t, v[0], v[1], v[2], &y)
                        }
                    }),
                );
                cs.fd.split = vec![0];
                cs
            }
            OpCase::AggregateReplicated => {
                let mut cs = case(vec![nrm(rng, &[a, b, c, d])], Box::new(|t, v| aggregate_replicated(t, v[0])));
                cs.fd.split = vec![0];
                cs
            }
            OpCase::InfoNce | OpCase::InfoNceNoStopGrad => {
                let sg = self == OpCase::InfoNce;
                let (n, p, g, dd, k) = (a + 1, b, c, dim(rng, 1, 3), d);
                let mut cs = case(
                    vec![nrm(rng, &[n, p, g, dd]), nrm(rng, &[n, p, g, dd]), nrm(rng, &[g * dd, k]).scale(0.5)],
                    Box::new(move |t, v| {
                        let agg = aggregate_replicated(t, v[0])?;
                        local_infonce(t, agg, v[1], v[2], sg)
                    }),
                );
                cs.fd.split = vec![0];
                if sg {
                    // View-two projections are constants built from the unperturbed inputs.
                    cs.fd.frozen = vec![1];
                    let (x2, w) = (cs.inputs[1].clone(), cs.inputs[2].clone());
                    let z2 = pool_patches(&x2).unwrap().matmul(&w).unwrap();
                    let z2t = z2.swap_axes(0, 1).unwrap();
                    let diag = Tensor::from_fn([n, p, g, n], |i| if i % n == i / (p * g * n) { 1.0 } else { 0.0 });
                    cs.fd.oracle = Some(std::rc::Rc::new(move |t, v| {
                        let agg = aggregate_replicated(t, v[0])?;
                        let z1 = t.linear(agg, v[2], None)?;
                        let z2t = t.constant(z2t.clone());
                        let sims = t.linear(z1, z2t, None)?;
                        t.softmax_xent(sims, diag.clone())
                    }));
                }
                cs
            }
            OpCase::TanhMlp => {
                let h = dim(rng, 2, 6);
                case(
                    vec![nrm(rng, &[a, d]), nrm(rng, &[d, h]), nrm(rng, &[h]), nrm(rng, &[h, c]), nrm(rng, &[c])],
                    Box::new(|t, v| {
                        let z = t.linear(v[0], v[1], Some(v[2]))?;
                        let hdn = t.tanh(z);
                        let z = t.linear(hdn, v[3], Some(v[4]))?;
                        Ok(t.tanh(z))
                    }),
                )
            }
        }
    }
}

fn dim(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn nrm(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    rng.standard_normal(shape.to_vec())
}

fn eval(case: &Case, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = match &case.fd.oracle {
        Some(f) => f(&mut tape, &vars)?,
        None => (case.build)(&mut tape, &vars)?,
    };
    Ok(tape.value(y).clone())
}

struct Engine {
    tangent: Tensor<f64>,
    grads: Vec<Tensor<f64>>,
}

fn engine(case: &Case, dirs: &[Tensor<f64>], cot: Option<&Tensor<f64>>, fault: bool) -> Result<Engine> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let y = (case.build)(&mut tape, &vars)?;
    let seeds: Vec<(Var, Tensor<f64>)> = vars.iter().copied().zip(dirs.iter().cloned()).collect();
    let tans = tape.jvp(&seeds)?;
    let mut tangent = tans.get(y).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(y).to_vec()));
    if fault {
        tangent = tangent.scale(1.0 + 1e-3);
    }
    let mut grads = Vec::new();
    if let Some(cot) = cot {
        let mut g = tape.backward(y, cot.clone())?;
        for (v, x) in vars.iter().zip(&case.inputs) {
            grads.push(g.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())));
        }
    }
    Ok(Engine { tangent, grads })
}

fn finite_difference(case: &Case, dirs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let shifted = |sign: f64| -> Vec<Tensor<f64>> {
        case.inputs
            .iter()
            .zip(dirs)
            .map(|(x, v)| {
                let mut x = x.clone();
                x.axpy(sign * FD_STEP, v).unwrap();
                x
            })
            .collect()
    };
    let fp = eval(case, &shifted(1.0))?;
    let fm = eval(case, &shifted(-1.0))?;
    Ok(fp.sub(&fm)?.scale(0.5 / FD_STEP))
}

/// `[N, P, G, ..] -> [N, ..]` by summing over the slice axes.
fn sum_slices(t: &Tensor<f64>) -> Tensor<f64> {
    let (n, pg) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let rest = t.len() / (n * pg);
    Tensor::from_fn([n, rest], |i| {
        let (ni, r) = (i / rest, i % rest);
        (0..pg).map(|s| t.data()[(ni * pg + s) * rest + r]).sum()
    })
}

/// `[N, P, G, ..] -> [N, ..]` keeping slice (0, 0).
fn first_slice(t: &Tensor<f64>) -> Tensor<f64> {
    let (n, pg) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let rest = t.len() / (n * pg);
    Tensor::from_fn([n, rest], |i| t.data()[(i / rest) * pg * rest + i % rest])
}

fn rel_l2(oracle: &Tensor<f64>, got: &Tensor<f64>) -> Result<f64> {
    let diff = l2(&oracle.sub(got)?);
    Ok(if diff == 0.0 { 0.0 } else { diff / l2(oracle).max(l2(got)).max(1e-12) })
}

fn l2(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Worst finite-difference, duality and linearity errors for one op.
pub fn check_op(op: OpCase, cfg: &GradCheckConfig) -> Result<[CheckResult; 3]> {
    let root = RngStream::new(cfg.seed, 0x6772_6164).derive(op as u64);
    let (mut fd_err, mut dual_err, mut lin_err) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..cfg.trials {
        let mut rng = root.derive(trial as u64);
        let case = op.sample(&mut rng);
        let dirs: Vec<Tensor<f64>> = case.inputs.iter().map(|x| rng.standard_normal(x.shape().to_vec())).collect();
        let y = eval(&case, &case.inputs)?;
        let cot = rng.standard_normal::<f64>(y.shape().to_vec());
        let e = engine(&case, &dirs, Some(&cot), cfg.inject_fault)?;

        if op.differentiable() {
            let only = |keep: &dyn Fn(usize) -> bool| -> Vec<Tensor<f64>> {
                dirs.iter()
                    .enumerate()
                    .map(|(i, v)| if keep(i) { v.clone() } else { Tensor::zeros(v.shape().to_vec()) })
                    .collect()
            };
            let shared = only(&|i| !case.fd.split.contains(&i) && !case.fd.frozen.contains(&i));
            let t = engine(&case, &shared, None, cfg.inject_fault)?.tangent;
            fd_err = fd_err.max(rel_l2(&finite_difference(&case, &shared)?, &t)?);
            if !case.fd.split.is_empty() {
                let split = only(&|i| case.fd.split.contains(&i));
                let t = engine(&case, &split, None, cfg.inject_fault)?.tangent;
                let fd = first_slice(&finite_difference(&case, &split)?);
                fd_err = fd_err.max(rel_l2(&fd, &sum_slices(&t))?);
            }
        } else if op == OpCase::StopGradient {
            fd_err = fd_err.max(e.tangent.max_abs());
        }

        // <cot, J v> against <Jᵀ cot, v>.
        let fwd = cot.dot(&e.tangent)?;
        let mut rev = 0.0;
        for (g, v) in e.grads.iter().zip(&dirs) {
            rev += g.dot(v)?;
        }
        dual_err = dual_err.max((fwd - rev).abs() / fwd.abs().max(1.0));

        let (ca, cb) = (rng.normal(), rng.normal());
        let dirs2: Vec<Tensor<f64>> = case.inputs.iter().map(|x| rng.standard_normal(x.shape().to_vec())).collect();
        let mix: Vec<Tensor<f64>> = dirs
            .iter()
            .zip(&dirs2)
            .map(|(v1, v2)| {
                let mut m = v1.scale(ca);
                m.axpy(cb, v2).unwrap();
                m
            })
            .collect();
        let t2 = engine(&case, &dirs2, None, cfg.inject_fault)?.tangent;
        let tm = engine(&case, &mix, None, cfg.inject_fault)?.tangent;
        let mut want = e.tangent.scale(ca);
        want.axpy(cb, &t2)?;
        let lerr = tm.sub(&want)?.max_abs() / want.max_abs().max(1.0);
        lin_err = lin_err.max(lerr);
    }
    let name = op.name();
    Ok([
        CheckResult { name: format!("jvp_fd/{name}"), cases: cfg.trials, max_err: fd_err, tol: FD_TOL },
        CheckResult { name: format!("duality/{name}"), cases: cfg.trials, max_err: dual_err, tol: DUALITY_TOL },
        CheckResult { name: format!("linearity/{name}"), cases: cfg.trials, max_err: lin_err, tol: LINEARITY_TOL },
    ])
}

/// All autodiff checks, double precision.
pub fn autodiff_checks(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for op in OpCase::ALL {
        out.extend(check_op(op, cfg)?);
    }
    Ok(out)
}

fn rel_max(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a.sub(b).map(|d| d.max_abs()).unwrap_or(f64::INFINITY);
    diff / b.max_abs().max(1.0)
}

/// Fused replicated cross-entropy in precision `T` against the naïve tape
/// graph in double precision: loss, JVP and VJP.
pub fn fused_checks_typed<T: Scalar>(cfg: &GradCheckConfig, tol: f64) -> Result<Vec<CheckResult>> {
    let root = RngStream::new(cfg.seed, 0x6675_7365);
    let (mut loss_err, mut jvp_err, mut vjp_err) = (0.0f64, 0.0f64, 0.0f64);
    let configs = 50;
    for i in 0..configs {
        let mut rng = root.derive(i);
        let n = 1 + rng.below(6);
        let p = 1 + rng.below(6);
        let g = 1 + rng.below(4);
        let d = 1 + rng.below(6);
        let k = 2 + rng.below(9);
        let c = g * d;
        let labels: Vec<u8> = (0..n).map(|_| rng.below(k) as u8).collect();
        let y = one_hot::<T>(&labels, k);
        let x = rng.standard_normal::<T>([n, p, g, d]);
        let w = rng.standard_normal::<T>([c, k]).scale(T::from_f64_lossy(1.0 / (c as f64).sqrt()));
        let b = rng.standard_normal::<T>([k]);
        let (dx, dw, db) = (
            rng.standard_normal::<T>([n, p, g, d]),
            rng.standard_normal::<T>([c, k]),
            rng.standard_normal::<T>([k]),
        );
        let ct = rng.standard_normal::<T>([n, p, g]);

        // The oracle runs in double precision on the same (rounded) inputs.
        let mut naive = Tape::<f64>::new();
        let (xv, wv, bv) = (naive.variable(x.cast()), naive.variable(w.cast()), naive.variable(b.cast()));
        let ln = naive_local_xent(&mut naive, xv, wv, bv, &y.cast())?;
        let tn = naive.jvp(&[(xv, dx.cast()), (wv, dw.cast()), (bv, db.cast())])?;
        let gn = naive.backward(ln, ct.cast())?;

        let mut fused = Tape::new();
        let (xf, wf, bf) = (fused.variable(x), fused.variable(w), fused.variable(b));
        let lf = fused.fused_local_xent(xf, wf, bf, y)?;
        let tf = fused.jvp(&[(xf, dx), (wf, dw), (bf, db)])?;
        let gf = fused.backward(lf, ct)?;

        loss_err = loss_err.max(rel_max(&fused.value(lf).cast(), naive.value(ln)));
        let mut tfl = tf.get(lf).unwrap().clone();
        if cfg.inject_fault {
            tfl = tfl.scale(T::from_f64_lossy(1.0 + 1e-3));
        }
        jvp_err = jvp_err.max(rel_max(&tfl.cast(), tn.get(ln).unwrap()));
        for (a, b) in [(xf, xv), (wf, wv), (bf, bv)] {
            vjp_err = vjp_err.max(rel_max(&gf.get(a).unwrap().cast(), gn.get(b).unwrap()));
        }
    }
    let tag = T::NAME;
    Ok(vec![
        CheckResult { name: format!("fused_loss/{tag}"), cases: configs as usize, max_err: loss_err, tol },
        CheckResult { name: format!("fused_jvp/{tag}"), cases: configs as usize, max_err: jvp_err, tol },
        CheckResult { name: format!("fused_vjp/{tag}"), cases: configs as usize, max_err: vjp_err, tol },
    ])
}

/// Fused checks at the precision selected by `cfg.double`.
pub fn fused_checks(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    if cfg.double {
        fused_checks_typed::<f64>(cfg, FUSED_TOL_DOUBLE)
    } else {
        fused_checks_typed::<f32>(cfg, FUSED_TOL_SINGLE)
    }
}

pub fn all_checks(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut out = autodiff_checks(cfg)?;
    out.extend(fused_checks(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_mlp_matches_finite_differences_tightly() {
        let cfg = GradCheckConfig { trials: 20, ..Default::default() };
        let [fd, _, _] = check_op(OpCase::TanhMlp, &cfg).unwrap();
        assert!(fd.max_err < 1e-6, "{fd:?}");
    }

    #[test]
    fn fault_injection_is_detected() {
        let cfg = GradCheckConfig { trials: 5, inject_fault: true, ..Default::default() };
        let [fd, _, _] = check_op(OpCase::Tanh, &cfg).unwrap();
        assert!(!fd.passed());
        assert!(fused_checks(&cfg).unwrap().iter().any(|r| !r.passed()));
    }
}
