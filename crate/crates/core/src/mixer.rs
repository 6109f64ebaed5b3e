//! LocalMixer: patch tokens, grouped channel mixing, per-patch normalization
//! and a projector head after every block.
//!
//! Activations flow as `[N, P, C]` tokens or `[N, P, G, D]` grouped tokens with
//! `C = G·D`. Each block normalizes before and after every linear layer by
//! default ([`NormPlacement`]); normalization is over the last axis, so it is
//! local to a patch, or to a (patch, group) slice after the group reshape.
//!
//! # Checkpoint format
//!
//! Little-endian throughout:
//!
//! ```text
//! magic     8 bytes  "FGMIXER\0"
//! version   u32      currently 1
//! config    8 × u32  blocks, side, channels, groups, classes, height, width, in_channels
//! count     u32      number of tensors
//! per tensor:
//!   name    u32 length + UTF-8 bytes (e.g. "block0.dense.w")
//!   shape   u32 rank + rank × u64 extents
//!   data    f32 × product(shape)
//! ```
//!
//! Tensors appear in [`MixerParams::named_tensors`] order. Loading checks
//! every name and shape against the header's config.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{NormGrad, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::pool_patches;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"FGMIXER\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    S1_1,
    M1_16,
    M8_16,
    L8_64,
    L32_64,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::S1_1, Preset::M1_16, Preset::M8_16, Preset::L8_64, Preset::L32_64];

    pub fn id(self) -> &'static str {
        match self {
            Preset::S1_1 => "s1-1",
            Preset::M1_16 => "m1-16",
            Preset::M8_16 => "m8-16",
            Preset::L8_64 => "l8-64",
            Preset::L32_64 => "l32-64",
        }
    }

    /// `(blocks, patches per side, channels, groups)`.
    pub fn sizes(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::S1_1 => (1, 1, 256, 1),
            Preset::M1_16 => (1, 1, 512, 16),
            Preset::M8_16 => (4, 8, 512, 16),
            Preset::L8_64 => (4, 8, 2048, 64),
            Preset::L32_64 => (4, 32, 2048, 64),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.id() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown model preset {s:?} (expected s1-1, m1-16, m8-16, l8-64 or l32-64)")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Image geometry and class count of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
}

impl InputShape {
    pub const MNIST: InputShape = InputShape { height: 28, width: 28, channels: 1, classes: 10 };
    pub const CIFAR10: InputShape = InputShape { height: 32, width: 32, channels: 3, classes: 10 };
    pub const IMAGENET: InputShape = InputShape { height: 224, width: 224, channels: 3, classes: 1000 };
}

/// Where normalizations sit inside a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormPlacement {
    /// Before and after every linear layer.
    #[default]
    BeforeAndAfter,
    BeforeLinear,
    AfterLinear,
    /// Only at the start of token mixing and of channel mixing.
    BeginBlock,
}

impl NormPlacement {
    fn keeps(self, slot: Slot) -> bool {
        match self {
            NormPlacement::BeforeAndAfter => true,
            NormPlacement::BeforeLinear => slot != Slot::Post,
            NormPlacement::AfterLinear => slot == Slot::Post,
            NormPlacement::BeginBlock => slot == Slot::Start,
        }
    }
}

impl FromStr for NormPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(NormPlacement::BeforeAndAfter),
            "before" => Ok(NormPlacement::BeforeLinear),
            "after" => Ok(NormPlacement::AfterLinear),
            "begin-block" => Ok(NormPlacement::BeginBlock),
            _ => Err(Error::Config(format!("unknown norm placement {s:?} (expected both, before, after or begin-block)"))),
        }
    }
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::BeforeAndAfter => "both",
            NormPlacement::BeforeLinear => "before",
            NormPlacement::AfterLinear => "after",
            NormPlacement::BeginBlock => "begin-block",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Start,
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixerConfig {
    pub blocks: usize,
    /// Patches per image side; `P = side²`.
    pub side: usize,
    pub channels: usize,
    pub groups: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
}

impl MixerConfig {
    /// A preset on a given input. Image sides that `side` does not divide are
    /// rounded up; [`pad_images`] zero-pads data to match.
    pub fn preset(preset: Preset, input: InputShape) -> Self {
        let (blocks, side, channels, groups) = preset.sizes();
        MixerConfig {
            blocks,
            side,
            channels,
            groups,
            num_classes: input.classes,
            height: input.height.div_ceil(side) * side,
            width: input.width.div_ceil(side) * side,
            in_channels: input.channels,
        }
    }

    pub fn patches(&self) -> usize {
        self.side * self.side
    }

    pub fn group_dim(&self) -> usize {
        self.channels / self.groups
    }

    /// Flattened length of one patch.
    pub fn patch_dim(&self) -> usize {
        (self.height / self.side) * (self.width / self.side) * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 || self.side == 0 || self.channels == 0 || self.groups == 0 || self.num_classes < 2 {
            return bad(format!("degenerate mixer config {self:?}"));
        }
        if self.channels % self.groups != 0 {
            return bad(format!("{} channels do not split into {} groups", self.channels, self.groups));
        }
        if self.height % self.side != 0 || self.width % self.side != 0 {
            return bad(format!("{}x{} image does not split into {} patches per side", self.height, self.width, self.side));
        }
        Ok(())
    }
}

/// Weight `[in, out]` (or `[G, D, E]` when grouped) and bias `[out]` (or `[G, E]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T: Scalar = f32> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    fn uniform(rng: &mut RngStream, w_shape: Vec<usize>, b_shape: Vec<usize>, fan_in: usize) -> Self {
        Affine { w: rng.uniform_tensor(w_shape, 1.0 / (fan_in as f64).sqrt()), b: Tensor::zeros(b_shape) }
    }

    fn zeros_like(&self) -> Self {
        Affine { w: Tensor::zeros(self.w.shape().to_vec()), b: Tensor::zeros(self.b.shape().to_vec()) }
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Scalar = f32> {
    /// Token mixing `[P, P]`; absent in the first block.
    pub token: Option<Affine<T>>,
    pub dense: Affine<T>,
    pub grouped: Affine<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams<T: Scalar = f32> {
    pub config: MixerConfig,
    pub blocks: Vec<BlockParams<T>>,
    /// Projector head per block, `[C, K]`.
    pub proj: Vec<Affine<T>>,
    pub classifier: Affine<T>,
}

impl<T: Scalar> MixerParams<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: &MixerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(seed, 0x6d69_7865_72);
        let (p, c, g, d, k) = (config.patches(), config.channels, config.groups, config.group_dim(), config.num_classes);
        let blocks = (0..config.blocks)
            .map(|i| {
                let mut rng = root.derive(i as u64);
                let fan = if i == 0 { config.patch_dim() } else { c };
                BlockParams {
                    token: (i > 0).then(|| Affine::uniform(&mut rng, vec![p, p], vec![p], p)),
                    dense: Affine::uniform(&mut rng, vec![fan, c], vec![c], fan),
                    grouped: Affine::uniform(&mut rng, vec![g, d, d], vec![g, d], d),
                }
            })
            .collect();
        let mut heads = root.derive(u64::MAX);
        let proj = (0..config.blocks).map(|_| Affine::uniform(&mut heads, vec![c, k], vec![k], c)).collect();
        let classifier = Affine::uniform(&mut heads, vec![c, k], vec![k], c);
        Ok(MixerParams { config: config.clone(), blocks, proj, classifier })
    }

    pub fn zeros_like(&self) -> Self {
        MixerParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    token: b.token.as_ref().map(Affine::zeros_like),
                    dense: b.dense.zeros_like(),
                    grouped: b.grouped.zeros_like(),
                })
                .collect(),
            proj: self.proj.iter().map(Affine::zeros_like).collect(),
            classifier: self.classifier.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> MixerParams<U> {
        let a = |x: &Affine<T>| Affine { w: x.w.cast(), b: x.b.cast() };
        MixerParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams { token: b.token.as_ref().map(a), dense: a(&b.dense), grouped: a(&b.grouped) })
                .collect(),
            proj: self.proj.iter().map(a).collect(),
            classifier: a(&self.classifier),
        }
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(t) = &b.token {
                out.push((format!("block{i}.token.w"), &t.w));
                out.push((format!("block{i}.token.b"), &t.b));
            }
            out.push((format!("block{i}.dense.w"), &b.dense.w));
            out.push((format!("block{i}.dense.b"), &b.dense.b));
            out.push((format!("block{i}.grouped.w"), &b.grouped.w));
            out.push((format!("block{i}.grouped.b"), &b.grouped.b));
        }
        for (i, h) in self.proj.iter().enumerate() {
            out.push((format!("proj{i}.w"), &h.w));
            out.push((format!("proj{i}.b"), &h.b));
        }
        out.push(("classifier.w".into(), &self.classifier.w));
        out.push(("classifier.b".into(), &self.classifier.b));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if let Some(t) = &mut b.token {
                out.push(&mut t.w);
                out.push(&mut t.b);
            }
            out.push(&mut b.dense.w);
            out.push(&mut b.dense.b);
            out.push(&mut b.grouped.w);
            out.push(&mut b.grouped.b);
        }
        for h in &mut self.proj {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out.push(&mut self.classifier.w);
        out.push(&mut self.classifier.b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.body_params() + self.head_params()
    }

    /// Parameters of the blocks only.
    pub fn body_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.token.as_ref().map_or(0, Affine::num_params) + b.dense.num_params() + b.grouped.num_params())
            .sum()
    }

    /// Projector heads plus the classifier.
    pub fn head_params(&self) -> usize {
        self.proj.iter().map(Affine::num_params).sum::<usize>() + self.classifier.num_params()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

impl MixerParams<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.blocks, c.side, c.channels, c.groups, c.num_classes, c.height, c.width, c.in_channels] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let named = self.named_tensors();
        buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader { bytes: &bytes, pos: 0, path };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(r.err(format!("not a mixer checkpoint (magic {:?})", String::from_utf8_lossy(magic))));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
        }
        let mut h = [0usize; 8];
        for v in &mut h {
            *v = r.u32()? as usize;
        }
        let config = MixerConfig {
            blocks: h[0],
            side: h[1],
            channels: h[2],
            groups: h[3],
            num_classes: h[4],
            height: h[5],
            width: h[6],
            in_channels: h[7],
        };
        let mut params = MixerParams::<f32>::init(&config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            params.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(r.err(format!("{count} tensors, config needs {}", expected.len())));
        }
        for ((name, shape), slot) in expected.into_iter().zip(params.tensors_mut()) {
            let len = r.u32()? as usize;
            let found = String::from_utf8_lossy(r.take(len)?).into_owned();
            if found != name {
                return Err(r.err(format!("expected tensor {name}, found {found}")));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != shape {
                return Err(r.err(format!("{name} has shape {dims:?}, config needs {shape:?}")));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            *slot = Tensor::new(shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(params)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: String) -> Error {
        Error::Format { path: self.path.to_path_buf(), msg }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// `[N, H, W, C]` images to `[N, side², patch_len]` tokens.
///
/// Patches are taken row-major over the grid, and each patch is flattened
/// row-major over `(row, column, channel)`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, side: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = dims4(images)?;
    if side == 0 || h % side != 0 || w % side != 0 {
        return Err(Error::Shape(format!("{h}x{w} image does not split into {side} patches per side")));
    }
    let (ph, pw) = (h / side, w / side);
    let plen = ph * pw * c;
    let mut out = Vec::with_capacity(images.len());
    let src = images.data();
    for ni in 0..n {
        for gi in 0..side {
            for gj in 0..side {
                for r in 0..ph {
                    let row = ((ni * h + gi * ph + r) * w + gj * pw) * c;
                    out.extend_from_slice(&src[row..row + pw * c]);
                }
            }
        }
    }
    Tensor::new([n, side * side, plen], out)
}

/// Inverse of [`patchify`] for images of the given height, width and channels.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, side: usize, h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    let n = match tokens.shape() {
        [n, p, l] if *p == side * side && side > 0 && h % side == 0 && w % side == 0 && *l == (h / side) * (w / side) * c => *n,
        s => return Err(Error::Shape(format!("tokens {s:?} are not {side}x{side} patches of a {h}x{w}x{c} image"))),
    };
    let (ph, pw) = (h / side, w / side);
    let mut out = vec![T::zero(); n * h * w * c];
    let mut src = tokens.data().chunks(pw * c);
    for ni in 0..n {
        for gi in 0..side {
            for gj in 0..side {
                for r in 0..ph {
                    let row = ((ni * h + gi * ph + r) * w + gj * pw) * c;
                    out[row..row + pw * c].copy_from_slice(src.next().unwrap());
                }
            }
        }
    }
    Tensor::new([n, h, w, c], out)
}

/// Zero-pads `[N, H, W, C]` images, centred, to `height × width`.
pub fn pad_images<T: Scalar>(images: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let [n, h, w, c] = dims4(images)?;
    if (h, w) == (height, width) {
        return Ok(images.clone());
    }
    if height < h || width < w {
        return Err(Error::Shape(format!("cannot pad {h}x{w} images down to {height}x{width}")));
    }
    let (top, left) = ((height - h) / 2, (width - w) / 2);
    let mut out = vec![T::zero(); n * height * width * c];
    for ni in 0..n {
        for r in 0..h {
            let src = ((ni * h + r) * w) * c;
            let dst = ((ni * height + top + r) * width + left) * c;
            out[dst..dst + w * c].copy_from_slice(&images.data()[src..src + w * c]);
        }
    }
    Tensor::new([n, height, width, c], out)
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> Result<[usize; 4]> {
    match x.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::Shape(format!("expected a 4-d image batch, got {s:?}"))),
    }
}

/// Knobs of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub placement: NormPlacement,
    pub norm_grad: NormGrad,
    /// Stop-gradient between blocks.
    pub greedy: bool,
    /// Stop-gradient in front of the classifier.
    pub detach_classifier: bool,
}

/// Which linear layer a perturbation site belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteKind {
    /// Token mixing; output laid out `[N, C, P]`.
    Token,
    /// Dense channel mixing; output `[N, P, C]`.
    Dense,
    /// Grouped channel mixing; output `[N, P, G, D]`.
    Grouped,
}

/// A linear layer output recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SiteTrace {
    pub block: usize,
    pub kind: SiteKind,
    /// The layer's input, after any normalization.
    pub input: Var,
    pub output: Var,
    /// The ReLU input that follows this layer.
    pub relu_input: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub token: Option<AffineVars>,
    pub dense: AffineVars,
    pub grouped: AffineVars,
}

/// Tape handles for every parameter.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub blocks: Vec<BlockVars>,
    pub proj: Vec<AffineVars>,
    pub classifier: AffineVars,
}

impl ParamVars {
    /// Same order as [`MixerParams::named_tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if let Some(t) = b.token {
                out.extend([t.w, t.b]);
            }
            out.extend([b.dense.w, b.dense.b, b.grouped.w, b.grouped.b]);
        }
        for h in &self.proj {
            out.extend([h.w, h.b]);
        }
        out.extend([self.classifier.w, self.classifier.b]);
        out
    }
}

/// Everything [`build_forward`] recorded.
#[derive(Clone, Debug)]
pub struct MixerTrace {
    pub params: ParamVars,
    pub sites: Vec<SiteTrace>,
    pub block_outputs: Vec<Var>,
    /// Normalized block outputs `[N, P, G, D]` feeding each projector.
    pub local_features: Vec<Var>,
    /// Pooled, normalized features `[N, C]` feeding the classifier.
    pub pooled: Var,
    pub logits: Var,
}

fn affine_vars<T: Scalar>(tape: &mut Tape<T>, a: &Affine<T>, grad: bool) -> AffineVars {
    AffineVars { w: tape.leaf(a.w.clone(), grad), b: tape.leaf(a.b.clone(), grad) }
}

/// Records parameters on the tape. Block weights take gradients when
/// `body_grad`; head weights are always constants.
pub fn param_vars<T: Scalar>(tape: &mut Tape<T>, params: &MixerParams<T>, body_grad: bool) -> ParamVars {
    let blocks = params
        .blocks
        .iter()
        .map(|b| BlockVars {
            token: b.token.as_ref().map(|t| affine_vars(tape, t, body_grad)),
            dense: affine_vars(tape, &b.dense, body_grad),
            grouped: affine_vars(tape, &b.grouped, body_grad),
        })
        .collect();
    let proj = params.proj.iter().map(|h| affine_vars(tape, h, false)).collect();
    let classifier = affine_vars(tape, &params.classifier, false);
    ParamVars { blocks, proj, classifier }
}

struct Builder<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    cfg: &'a MixerConfig,
    opts: ForwardOptions,
    sites: Vec<SiteTrace>,
}

impl<T: Scalar> Builder<'_, T> {
    fn norm(&mut self, x: Var, slot: Slot) -> Var {
        if self.opts.placement.keeps(slot) {
            self.tape.normalize(x, self.opts.norm_grad)
        } else {
            x
        }
    }

    fn site(&mut self, block: usize, kind: SiteKind, input: Var, output: Var) -> usize {
        self.sites.push(SiteTrace { block, kind, input, output, relu_input: output });
        self.sites.len() - 1
    }

    /// Dense channel mixing through the grouped layer, up to its post-norm.
    fn channel_mix(&mut self, block: usize, x: Var, v: &BlockVars, first: Slot) -> Result<Var> {
        let n = self.tape.shape(x)[0];
        let (p, g) = (self.cfg.patches(), self.cfg.groups);
        let x = self.norm(x, first);
        let z = self.tape.linear(x, v.dense.w, Some(v.dense.b))?;
        let s = self.site(block, SiteKind::Dense, x, z);
        let h = self.norm(z, Slot::Post);
        self.sites[s].relu_input = h;
        let h = self.tape.relu(h);
        let h = self.tape.reshape(h, [n, p, g, self.cfg.group_dim()])?;
        let h = self.norm(h, Slot::Pre);
        let z = self.tape.group_linear(h, v.grouped.w, Some(v.grouped.b))?;
        self.site(block, SiteKind::Grouped, h, z);
        Ok(self.norm(z, Slot::Post))
    }

    fn block0(&mut self, x: Var, v: &BlockVars) -> Result<Var> {
        let h = self.channel_mix(0, x, v, Slot::Start)?;
        let last = self.sites.len() - 1;
        self.sites[last].relu_input = h;
        Ok(self.tape.relu(h))
    }

    fn mlp_block(&mut self, block: usize, x: Var, v: &BlockVars) -> Result<Var> {
        let n = self.tape.shape(x)[0];
        let (p, c) = (self.cfg.patches(), self.cfg.channels);
        let token = v.token.ok_or_else(|| Error::Config(format!("block {block} has no token-mixing weights")))?;
        let h = self.tape.reshape(x, [n, p, c])?;
        let h = self.norm(h, Slot::Start);
        let h = self.tape.swap_axes(h, 1, 2)?;
        let z = self.tape.linear(h, token.w, Some(token.b))?;
        let s = self.site(block, SiteKind::Token, h, z);
        let h = self.tape.swap_axes(z, 1, 2)?;
        let h = self.norm(h, Slot::Post);
        self.sites[s].relu_input = h;
        let h = self.tape.relu(h);
        let h = self.channel_mix(block, h, v, Slot::Start)?;
        let h = self.tape.add(h, x)?;
        let last = self.sites.len() - 1;
        self.sites[last].relu_input = h;
        Ok(self.tape.relu(h))
    }
}

/// Records a full forward pass on `tape`.
///
/// `tokens` is the patchified batch `[N, P, patch_len]`.
pub fn build_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &MixerParams<T>,
    tokens: Tensor<T>,
    body_grad: bool,
    opts: ForwardOptions,
) -> Result<MixerTrace> {
    let cfg = &params.config;
    let (n, p, g, d) = (tokens.shape()[0], cfg.patches(), cfg.groups, cfg.group_dim());
    if tokens.shape() != [n, p, cfg.patch_dim()] {
        return Err(Error::Shape(format!(
            "tokens {:?} do not match config ({p} patches of {})",
            tokens.shape(),
            cfg.patch_dim()
        )));
    }
    let vars = param_vars(tape, params, body_grad);
    let x = tape.constant(tokens);
    let mut b = Builder { tape, cfg, opts, sites: Vec::new() };
    let mut block_outputs = Vec::new();
    let mut local_features = Vec::new();
    let mut h = x;
    for (i, bv) in vars.blocks.iter().enumerate() {
        if i > 0 && opts.greedy {
            h = b.tape.stop_gradient(h);
        }
        h = if i == 0 { b.block0(h, bv)? } else { b.mlp_block(i, h, bv)? };
        block_outputs.push(h);
        local_features.push(b.tape.normalize(h, opts.norm_grad));
    }
    let sites = b.sites;
    let tape = b.tape;
    let mut top = h;
    if opts.detach_classifier {
        top = tape.stop_gradient(top);
    }
    let flat = tape.reshape(top, [n, p, g * d])?;
    let pooled = tape.mean_axis(flat, 1)?;
    let pooled = tape.reshape(pooled, [n, g * d])?;
    let pooled = tape.normalize(pooled, opts.norm_grad);
    let logits = tape.linear(pooled, vars.classifier.w, Some(vars.classifier.b))?;
    Ok(MixerTrace { params: vars, sites, block_outputs, local_features, pooled, logits })
}

/// Class logits `[N, K]` and per-block projector logits `[N, K]` on the
/// patch-pooled, group-concatenated local features.
pub fn full_forward<T: Scalar>(
    params: &MixerParams<T>,
    tokens: &Tensor<T>,
    opts: ForwardOptions,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let trace = build_forward(&mut tape, params, tokens.clone(), false, opts)?;
    let local = trace
        .local_features
        .iter()
        .zip(&params.proj)
        .map(|(&f, head)| {
            let pooled = pool_patches(tape.value(f))?;
            crate::autodiff::linear_forward(&pooled, &head.w, Some(&head.b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tape.value(trace.logits).clone(), local))
}

/// The first block alone on `[N, P, patch_len]` tokens.
pub fn block0_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &BlockParams<T>,
    cfg: &MixerConfig,
    placement: NormPlacement,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = block_vars(&mut tape, block);
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions { placement, ..Default::default() };
    let mut b = Builder { tape: &mut tape, cfg, opts, sites: Vec::new() };
    let y = b.block0(xv, &v)?;
    Ok(tape.value(y).clone())
}

/// A token- and channel-mixing block alone on `[N, P, G, D]`.
pub fn mlp_block_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &BlockParams<T>,
    cfg: &MixerConfig,
    placement: NormPlacement,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = block_vars(&mut tape, block);
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions { placement, ..Default::default() };
    let mut b = Builder { tape: &mut tape, cfg, opts, sites: Vec::new() };
    let y = b.mlp_block(1, xv, &v)?;
    Ok(tape.value(y).clone())
}

fn block_vars<T: Scalar>(tape: &mut Tape<T>, block: &BlockParams<T>) -> BlockVars {
    BlockVars {
        token: block.token.as_ref().map(|t| affine_vars(tape, t, false)),
        dense: affine_vars(tape, &block.dense, false),
        grouped: affine_vars(tape, &block.grouped, false),
    }
}

/// Expands per-slice values `[N, P, G]` onto a site's output layout, so each
/// unit sees the value of the (patch, group) slice it belongs to.
pub fn expand_slices<T: Scalar>(kind: SiteKind, slices: &Tensor<T>, out_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, p, g] = match slices.shape() {
        [n, p, g] => [*n, *p, *g],
        s => return Err(Error::Shape(format!("slice values must be [N, P, G], got {s:?}"))),
    };
    let s = slices.data();
    let bad = || Error::Shape(format!("{kind:?} site of shape {out_shape:?} vs slices {:?}", slices.shape()));
    match (kind, out_shape) {
        (SiteKind::Grouped, &[n2, p2, g2, d]) if (n2, p2, g2) == (n, p, g) => {
            Ok(Tensor::from_fn(out_shape.to_vec(), |i| s[i / d]))
        }
        (SiteKind::Dense, &[n2, p2, c]) if (n2, p2) == (n, p) && c % g == 0 => {
            let d = c / g;
            Ok(Tensor::from_fn(out_shape.to_vec(), |i| {
                let (row, ch) = (i / c, i % c);
                s[row * g + ch / d]
            }))
        }
        (SiteKind::Token, &[n2, c, p2]) if (n2, p2) == (n, p) && c % g == 0 => {
            let d = c / g;
            Ok(Tensor::from_fn(out_shape.to_vec(), |i| {
                let (ni, ch, pi) = (i / (c * p), (i / p) % c, i % p);
                s[(ni * p + pi) * g + ch / d]
            }))
        }
        _ => Err(bad()),
    }
}

impl SiteTrace {
    /// The ReLU input in this site's output layout.
    pub fn mask_source<T: Scalar>(&self, tape: &Tape<T>) -> Result<Tensor<T>> {
        let v = tape.value(self.relu_input);
        match self.kind {
            SiteKind::Token => v.swap_axes(1, 2),
            SiteKind::Dense | SiteKind::Grouped => Ok(v.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grouped_matmul;

    fn tiny(blocks: usize, side: usize, channels: usize, groups: usize) -> MixerConfig {
        MixerConfig { blocks, side, channels, groups, num_classes: 3, height: 4, width: 4, in_channels: 2 }
    }

    fn tokens(cfg: &MixerConfig, n: usize, seed: u64) -> Tensor<f64> {
        RngStream::new(seed, 1).standard_normal([n, cfg.patches(), cfg.patch_dim()])
    }

    #[test]
    fn preset_sizes() {
        let s = MixerParams::<f32>::init(&MixerConfig::preset(Preset::S1_1, InputShape::MNIST), 0).unwrap();
        assert_eq!(s.num_params(), 271_892);
        assert_eq!(s.body_params(), 266_752);
        let m = MixerParams::<f32>::init(&MixerConfig::preset(Preset::M1_16, InputShape::MNIST), 0).unwrap();
        assert_eq!(m.num_params(), 429_076);
        let c = MixerParams::<f32>::init(&MixerConfig::preset(Preset::M8_16, InputShape::CIFAR10), 0).unwrap();
        assert_eq!(c.num_params(), 918_770);
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.id().parse::<Preset>().unwrap(), p);
        }
        assert!("x9-9".parse::<Preset>().is_err());
    }

    #[test]
    fn indivisible_images_are_padded_up() {
        let cfg = MixerConfig::preset(Preset::M8_16, InputShape::MNIST);
        assert_eq!((cfg.height, cfg.width, cfg.patch_dim()), (32, 32, 16));
        let img = Tensor::<f32>::full([1, 28, 28, 1], 1.0);
        let padded = pad_images(&img, 32, 32).unwrap();
        assert_eq!(padded.sum(), 784.0);
        assert_eq!(padded.data()[0], 0.0);
        assert_eq!(padded.data()[2 * 32 + 2], 1.0);
    }

    #[test]
    fn patchify_single_patch_is_flat_image() {
        let img = Tensor::<f32>::from_fn([2, 4, 4, 3], |i| i as f32);
        let t = patchify(&img, 1).unwrap();
        assert_eq!(t.shape(), [2, 1, 48]);
        assert_eq!(t.data(), img.data());
    }

    #[test]
    fn patchify_two_by_two() {
        let img = Tensor::<f32>::from_fn([1, 4, 4, 1], |i| i as f32);
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.shape(), [1, 4, 4]);
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&t.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&t.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
        let mut sorted = t.data().to_vec();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted, img.data());
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patchify_round_trips() {
        let img: Tensor<f32> = RngStream::new(3, 0).standard_normal([3, 8, 12, 2]);
        for side in [1, 2, 4] {
            let t = patchify(&img, side).unwrap();
            assert_eq!(unpatchify(&t, side, 8, 12, 2).unwrap(), img);
        }
    }

    #[test]
    fn zero_block0_outputs_zero() {
        let cfg = tiny(1, 1, 8, 2);
        let mut params = MixerParams::<f64>::init(&cfg, 0).unwrap();
        params = params.zeros_like();
        let y = block0_forward(&tokens(&cfg, 3, 1), &params.blocks[0], &cfg, NormPlacement::BeforeAndAfter).unwrap();
        assert_eq!(y.shape(), [3, 1, 2, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    fn norm_rows(x: &Tensor<f64>) -> Tensor<f64> {
        crate::autodiff::normalize_forward(x, 1e-5).0
    }

    #[test]
    fn single_group_block0_is_a_two_layer_mlp() {
        let cfg = tiny(1, 2, 6, 1);
        let params = MixerParams::<f64>::init(&cfg, 4).unwrap();
        let blk = &params.blocks[0];
        let x = tokens(&cfg, 2, 2);
        let y = block0_forward(&x, blk, &cfg, NormPlacement::BeforeAndAfter).unwrap();
        // Plain matrices: normalize rows, multiply, normalize, relu, repeat.
        let rows = x.reshape([2 * 4, cfg.patch_dim()]).unwrap();
        let h = norm_rows(&rows).matmul(&blk.dense.w).unwrap();
        let h = h.zip_map(&Tensor::from_fn([8, 6], |i| blk.dense.b.data()[i % 6]), |a, b| a + b).unwrap();
        let h = norm_rows(&h).map(|v| v.max(0.0));
        let w2 = blk.grouped.w.reshape([6, 6]).unwrap();
        let h = norm_rows(&h).matmul(&w2).unwrap();
        let h = h.zip_map(&Tensor::from_fn([8, 6], |i| blk.grouped.b.data()[i % 6]), |a, b| a + b).unwrap();
        let expect = norm_rows(&h).map(|v| v.max(0.0));
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grouped_layer_isolates_groups() {
        let x: Tensor<f64> = RngStream::new(5, 0).standard_normal([2, 3, 4, 5]);
        let w: Tensor<f64> = RngStream::new(6, 0).standard_normal([4, 5, 5]);
        let b: Tensor<f64> = RngStream::new(7, 0).standard_normal([4, 5]);
        let base = grouped_matmul(&x, &w, Some(&b)).unwrap();
        let mut probed = x.clone();
        for (i, v) in probed.data_mut().iter_mut().enumerate() {
            if (i / 5) % 4 != 2 {
                *v = 0.0;
            }
        }
        let out = grouped_matmul(&probed, &w, Some(&b)).unwrap();
        for (i, (a, o)) in base.data().iter().zip(out.data()).enumerate() {
            if (i / 5) % 4 == 2 {
                assert_eq!(a.to_bits(), o.to_bits());
            }
        }
    }

    #[test]
    fn block0_group_isolation_after_the_dense_layer() {
        // Zeroing other groups at the grouped layer's input leaves group g intact.
        let cfg = tiny(1, 1, 8, 4);
        let params = MixerParams::<f64>::init(&cfg, 9).unwrap();
        let mut tape = Tape::<f64>::new();
        let trace = build_forward(&mut tape, &params, tokens(&cfg, 2, 3), false, ForwardOptions::default()).unwrap();
        let grouped = trace.sites.iter().find(|s| s.kind == SiteKind::Grouped).unwrap();
        let input = tape.value(grouped.input).clone();
        let blk = &params.blocks[0];
        let full = grouped_matmul(&input, &blk.grouped.w, Some(&blk.grouped.b)).unwrap();
        let mut masked = input.clone();
        for (i, v) in masked.data_mut().iter_mut().enumerate() {
            if (i / 2) % 4 != 1 {
                *v = 0.0;
            }
        }
        let part = grouped_matmul(&masked, &blk.grouped.w, Some(&blk.grouped.b)).unwrap();
        for i in (0..full.len()).filter(|i| (i / 2) % 4 == 1) {
            assert_eq!(full.data()[i], part.data()[i]);
        }
    }

    #[test]
    fn mlp_block_hand_trace_with_identity_token_mixing() {
        // Constant input x = a everywhere: every normalization of a constant row
        // is 0, so token mixing yields relu(0 + b_tok) normalized = 0, channel
        // mixing of zeros with zero weights yields normalized biases = 0, and
        // the block returns relu(x + 0).
        let cfg = tiny(2, 2, 4, 2);
        let mut params = MixerParams::<f64>::init(&cfg, 1).unwrap().zeros_like();
        params.blocks[1].token.as_mut().unwrap().w = Tensor::eye(4);
        for a in [-0.5, 0.0, 1.25] {
            let x = Tensor::full([2, 4, 2, 2], a);
            let y = mlp_block_forward(&x, &params.blocks[1], &cfg, NormPlacement::BeforeAndAfter).unwrap();
            assert!(y.data().iter().all(|&v| v == f64::max(a, 0.0)));
        }
        // Non-constant input, no normalization after the token layer: the
        // identity token map passes x through, channel weights are zero, so
        // the grouped output is the bias alone, and the block is relu(x + b).
        let x: Tensor<f64> = RngStream::new(2, 0).standard_normal([1, 4, 2, 2]);
        params.blocks[1].grouped.b = Tensor::new([2, 2], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let y = mlp_block_forward(&x, &params.blocks[1], &cfg, NormPlacement::BeginBlock).unwrap();
        for (i, (&yi, &xi)) in y.data().iter().zip(x.data()).enumerate() {
            let b = params.blocks[1].grouped.b.data()[i % 4];
            assert!((yi - (xi + b).max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn single_patch_token_mixing_is_a_gain() {
        let cfg = tiny(2, 1, 4, 2);
        let mut params = MixerParams::<f64>::init(&cfg, 3).unwrap();
        let x: Tensor<f64> = RngStream::new(4, 0).standard_normal([3, 1, 2, 2]);
        params.blocks[1].token = Some(Affine { w: Tensor::full([1, 1], 2.0), b: Tensor::zeros([1]) });
        let a = mlp_block_forward(&x, &params.blocks[1], &cfg, NormPlacement::BeforeAndAfter).unwrap();
        params.blocks[1].token = Some(Affine { w: Tensor::full([1, 1], 1.0), b: Tensor::zeros([1]) });
        let b = mlp_block_forward(&x, &params.blocks[1], &cfg, NormPlacement::BeforeAndAfter).unwrap();
        // The post-token normalization removes any positive gain.
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn patch_permutation_equivariance() {
        let cfg = tiny(2, 2, 4, 2);
        let params = MixerParams::<f64>::init(&cfg, 8).unwrap();
        let x: Tensor<f64> = RngStream::new(9, 0).standard_normal([2, 4, 2, 2]);
        let perm = [2usize, 0, 3, 1];
        let permute_patches = |t: &Tensor<f64>| {
            let inner = t.len() / (t.shape()[0] * 4);
            Tensor::from_fn(t.shape().to_vec(), |i| {
                let (n, p, r) = (i / (4 * inner), (i / inner) % 4, i % inner);
                t.data()[(n * 4 + perm[p]) * inner + r]
            })
        };
        let mut pp = params.blocks[1].clone();
        let tok = pp.token.as_mut().unwrap();
        let (w, b) = (tok.w.clone(), tok.b.clone());
        tok.w = Tensor::from_fn([4, 4], |i| w.data()[perm[i / 4] * 4 + perm[i % 4]]);
        tok.b = Tensor::from_fn([4], |i| b.data()[perm[i]]);
        let y = mlp_block_forward(&x, &params.blocks[1], &cfg, NormPlacement::BeforeAndAfter).unwrap();
        let yp = mlp_block_forward(&permute_patches(&x), &pp, &cfg, NormPlacement::BeforeAndAfter).unwrap();
        let expect = permute_patches(&y);
        for (a, b) in yp.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_normalization_statistics() {
        let cfg = tiny(2, 2, 8, 2);
        let params = MixerParams::<f64>::init(&cfg, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let trace = build_forward(&mut tape, &params, tokens(&cfg, 3, 5), false, ForwardOptions::default()).unwrap();
        for &f in &trace.local_features {
            for row in tape.value(f).data().chunks(4) {
                let m = row.iter().sum::<f64>() / 4.0;
                let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
                assert!(m.abs() < 1e-6);
                // var / (var_in + eps) <= 1, with equality when var_in >> eps.
                assert!(v <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn greedy_mode_blocks_earlier_tangents() {
        let cfg = tiny(3, 2, 4, 2);
        let params = MixerParams::<f64>::init(&cfg, 11).unwrap();
        for greedy in [true, false] {
            let mut tape = Tape::<f64>::new();
            let opts = ForwardOptions { greedy, ..Default::default() };
            let trace = build_forward(&mut tape, &params, tokens(&cfg, 2, 6), false, opts).unwrap();
            let s0 = trace.sites.iter().find(|s| s.block == 0).unwrap();
            let seed = RngStream::new(1, 1).standard_normal(tape.shape(s0.output).to_vec());
            let tan = tape.jvp(&[(s0.output, seed)]).unwrap();
            for b in 1..3 {
                let t = tan.get(trace.local_features[b]);
                if greedy {
                    assert!(t.is_none());
                } else {
                    assert!(t.unwrap().max_abs() > 0.0);
                }
            }
            assert!(tan.get(trace.local_features[0]).unwrap().max_abs() > 0.0);
        }
    }

    #[test]
    fn greedy_mode_leaves_primals_alone() {
        let cfg = tiny(3, 2, 4, 2);
        let params = MixerParams::<f64>::init(&cfg, 12).unwrap();
        let x = tokens(&cfg, 4, 7);
        let a = full_forward(&params, &x, ForwardOptions { greedy: true, ..Default::default() }).unwrap();
        let b = full_forward(&params, &x, ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn s1_1_shapes() {
        let cfg = MixerConfig::preset(Preset::S1_1, InputShape::MNIST);
        let params = MixerParams::<f32>::init(&cfg, 0).unwrap();
        let img: Tensor<f32> = RngStream::new(0, 0).uniform_tensor([5, 28, 28, 1], 1.0);
        let (logits, local) = full_forward(&params, &patchify(&img, 1).unwrap(), ForwardOptions::default()).unwrap();
        assert_eq!(logits.shape(), [5, 10]);
        assert_eq!(local.len(), 1);
        assert_eq!(local[0].shape(), [5, 10]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(2, 2, 4, 2);
        let x = tokens(&cfg, 3, 1);
        let a = full_forward(&MixerParams::<f64>::init(&cfg, 5).unwrap(), &x, ForwardOptions::default()).unwrap();
        let b = full_forward(&MixerParams::<f64>::init(&cfg, 5).unwrap(), &x, ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn slices_expand_to_site_layouts() {
        let s = Tensor::<f64>::from_fn([1, 2, 2], |i| i as f64);
        let g = expand_slices(SiteKind::Grouped, &s, &[1, 2, 2, 3]).unwrap();
        assert_eq!(g.data(), [0., 0., 0., 1., 1., 1., 2., 2., 2., 3., 3., 3.]);
        let d = expand_slices(SiteKind::Dense, &s, &[1, 2, 4]).unwrap();
        assert_eq!(d.data(), [0., 0., 1., 1., 2., 2., 3., 3.]);
        let t = expand_slices(SiteKind::Token, &s, &[1, 4, 2]).unwrap();
        assert_eq!(t.data(), [0., 2., 0., 2., 1., 3., 1., 3.]);
        assert!(expand_slices(SiteKind::Dense, &s, &[1, 3, 4]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = MixerParams::<f32>::init(&tiny(2, 2, 4, 2), 3).unwrap();
        params.save(&path).unwrap();
        assert_eq!(MixerParams::load(&path).unwrap(), params);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(MixerParams::load(&path), Err(Error::Format { .. })));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = MixerParams::load(&path).unwrap_err().to_string();
        assert!(err.contains("not a mixer checkpoint"), "{err}");
    }
}
