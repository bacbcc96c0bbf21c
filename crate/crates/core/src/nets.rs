//! Networks: shared backbone, heads `f1`/`f2`, multiplicative fusion,
//! classifier `h` and discriminator `g`, with exact reverse-mode gradients.
//!
//! Everything is generic over the scalar type so training can run in `f32`
//! while gradient checks run in `f64`. Activations are `[batch, features]`
//! matrices; convolutional features are laid out channel-major as
//! `[C][D][H][W]`, so a 2-D convolution is a 3-D one with `D = 1` and
//! reshaping `C x D` into channels is free.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::{Error, Result};

pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cast<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Two 3x3 convolutions and global average pooling.
    Compact2d,
    /// Four 3-D convolution blocks and global average pooling.
    Cnn3d,
    /// Three 3-D convolutions, one 2-D convolution, two dense layers.
    #[serde(rename = "hybridsn")]
    HybridSn,
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact2d" => Ok(Backbone::Compact2d),
            "cnn3d" => Ok(Backbone::Cnn3d),
            "hybridsn" => Ok(Backbone::HybridSn),
            other => Err(Error::Argument(format!("unknown backbone {other:?}"))),
        }
    }
}

impl Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backbone::Compact2d => "compact2d",
            Backbone::Cnn3d => "cnn3d",
            Backbone::HybridSn => "hybridsn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub backbone: Backbone,
    /// Width `N1` of `f1`, `f2` and the fused feature.
    pub feature_dim: usize,
    pub class_count: usize,
    /// Number of environment pseudo-classes, the discriminator output width.
    pub env_count: usize,
    pub patch_size: usize,
    pub bands: usize,
    pub seed: u64,
    /// Convolution widths; empty selects the backbone default.
    #[serde(default)]
    pub conv_channels: Vec<usize>,
    /// Hidden width of the `f1`/`f2` heads.
    pub head_hidden: usize,
    /// Hidden widths of the discriminator.
    pub disc_hidden: [usize; 2],
}

impl NetConfig {
    pub fn new(
        backbone: Backbone,
        class_count: usize,
        env_count: usize,
        patch_size: usize,
        bands: usize,
        seed: u64,
    ) -> Self {
        NetConfig {
            backbone,
            feature_dim: 128,
            class_count,
            env_count,
            patch_size,
            bands,
            seed,
            conv_channels: Vec::new(),
            head_hidden: 128,
            disc_hidden: [64, 64],
        }
    }

    pub fn channels(&self) -> Vec<usize> {
        if !self.conv_channels.is_empty() {
            return self.conv_channels.clone();
        }
        match self.backbone {
            Backbone::Compact2d => vec![32, 64],
            Backbone::Cnn3d => vec![8, 16, 32, 32],
            Backbone::HybridSn => vec![8, 16, 32, 64, 256, 128],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("feature_dim", self.feature_dim),
            ("class_count", self.class_count),
            ("env_count", self.env_count),
            ("bands", self.bands),
            ("head_hidden", self.head_hidden),
            ("disc_hidden[0]", self.disc_hidden[0]),
            ("disc_hidden[1]", self.disc_hidden[1]),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be >= 1")));
            }
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::Argument(format!(
                "patch_size must be odd, got {}",
                self.patch_size
            )));
        }
        let want = match self.backbone {
            Backbone::Compact2d => 2,
            Backbone::Cnn3d => 4,
            Backbone::HybridSn => 6,
        };
        let ch = self.channels();
        if ch.len() != want || ch.contains(&0) {
            return Err(Error::Argument(format!(
                "{} expects {want} positive conv_channels, got {:?}",
                self.backbone, ch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Head1,
    Head2,
    Classifier,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvGeom {
    in_c: usize,
    in_d: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    stride_d: usize,
    pad_h: usize,
    pad_w: usize,
    out_d: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_c: usize,
        in_d: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        (kd, kh, kw): (usize, usize, usize),
        stride_d: usize,
        pad: usize,
    ) -> Result<Self> {
        if kd > in_d || kh > in_h + 2 * pad || kw > in_w + 2 * pad {
            return Err(Error::Argument(format!(
                "kernel {kd}x{kh}x{kw} larger than input {in_d}x{in_h}x{in_w}"
            )));
        }
        Ok(ConvGeom {
            in_c,
            in_d,
            in_h,
            in_w,
            out_c,
            kd,
            kh,
            kw,
            stride_d,
            pad_h: pad,
            pad_w: pad,
            out_d: (in_d - kd) / stride_d + 1,
            out_h: in_h + 2 * pad - kh + 1,
            out_w: in_w + 2 * pad - kw + 1,
        })
    }

    fn k(&self) -> usize {
        self.in_c * self.kd * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_d * self.out_h * self.out_w
    }

    fn in_features(&self) -> usize {
        self.in_c * self.in_d * self.in_h * self.in_w
    }

    /// For each kernel row: `(input offset within a sample, output position)`
    /// pairs of every in-bounds tap, flattened.
    fn visit<F: FnMut(usize, usize, usize)>(&self, mut f: F) {
        let p_in_c = self.in_d * self.in_h * self.in_w;
        for c in 0..self.in_c {
            for dz in 0..self.kd {
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        let krow = ((c * self.kd + dz) * self.kh + dy) * self.kw + dx;
                        for z in 0..self.out_d {
                            let iz = z * self.stride_d + dz;
                            for y in 0..self.out_h {
                                let iy = y as isize + dy as isize - self.pad_h as isize;
                                if iy < 0 || iy >= self.in_h as isize {
                                    continue;
                                }
                                let x_lo = self.pad_w.saturating_sub(dx);
                                let x_hi = (self.in_w + self.pad_w).saturating_sub(dx).min(self.out_w);
                                let in_row = c * p_in_c + (iz * self.in_h + iy as usize) * self.in_w;
                                let out_row = (z * self.out_h + y) * self.out_w;
                                for x in x_lo..x_hi {
                                    let ix = x + dx - self.pad_w;
                                    f(krow, in_row + ix, out_row + x);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Conv {
        name: String,
        geom: ConvGeom,
        weight: usize,
        bias: usize,
    },
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: usize,
    },
    Relu {
        name: String,
    },
    /// Mean over the trailing `positions` of each of `channels` blocks.
    AvgPool {
        name: String,
        channels: usize,
        positions: usize,
    },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Conv { name, .. }
            | Op::Linear { name, .. }
            | Op::Relu { name }
            | Op::AvgPool { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Architecture {
    backbone: Vec<Op>,
    head1: Vec<Op>,
    head2: Vec<Op>,
    classifier: Vec<Op>,
    disc: Vec<Op>,
    hidden: usize,
}

/// Collects tensor shapes while the architecture is laid out.
struct Builder {
    shapes: Vec<(String, ParamGroup, Vec<usize>, usize)>,
}

impl Builder {
    fn tensor(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, fan_in: usize) -> usize {
        self.shapes.push((name, group, shape, fan_in));
        self.shapes.len() - 1
    }

    fn conv(&mut self, prefix: &str, group: ParamGroup, geom: ConvGeom) -> Op {
        let name = prefix.to_string();
        let weight = self.tensor(
            format!("{name}.weight"),
            group,
            vec![geom.out_c, geom.in_c, geom.kd, geom.kh, geom.kw],
            geom.k(),
        );
        let bias = self.tensor(format!("{name}.bias"), group, vec![geom.out_c], 0);
        Op::Conv {
            name,
            geom,
            weight,
            bias,
        }
    }

    fn linear(&mut self, name: &str, group: ParamGroup, inputs: usize, outputs: usize) -> Op {
        let weight = self.tensor(format!("{name}.weight"), group, vec![inputs, outputs], inputs);
        let bias = self.tensor(format!("{name}.bias"), group, vec![outputs], 0);
        Op::Linear {
            name: name.to_string(),
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    fn mlp(&mut self, prefix: &str, group: ParamGroup, widths: &[usize]) -> Vec<Op> {
        let mut ops = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            if i > 0 {
                ops.push(Op::Relu {
                    name: format!("{prefix}.relu{i}"),
                });
            }
            ops.push(self.linear(&format!("{prefix}.fc{}", i + 1), group, w[0], w[1]));
        }
        ops
    }
}

fn build(config: &NetConfig) -> Result<(Architecture, Builder)> {
    config.validate()?;
    let mut b = Builder { shapes: Vec::new() };
    let s = config.patch_size;
    let d = config.bands;
    let ch = config.channels();
    let bb = ParamGroup::Backbone;
    let relu = |n: &str| Op::Relu { name: n.to_string() };
    let mut backbone = Vec::new();
    let hidden;
    match config.backbone {
        Backbone::Compact2d => {
            let g1 = ConvGeom::new(d, 1, s, s, ch[0], (1, 3, 3), 1, 1)?;
            backbone.push(b.conv("backbone.conv1", bb, g1));
            backbone.push(relu("backbone.relu1"));
            let g2 = ConvGeom::new(ch[0], 1, s, s, ch[1], (1, 3, 3), 1, 1)?;
            backbone.push(b.conv("backbone.conv2", bb, g2));
            backbone.push(relu("backbone.relu2"));
            backbone.push(Op::AvgPool {
                name: "backbone.pool".into(),
                channels: ch[1],
                positions: s * s,
            });
            hidden = ch[1];
        }
        Backbone::Cnn3d => {
            let (mut in_c, mut in_d) = (1, d);
            for (i, &out_c) in ch.iter().enumerate() {
                let kd = in_d.min(3);
                let stride = if i > 0 && in_d >= 8 { 2 } else { 1 };
                let g = ConvGeom::new(in_c, in_d, s, s, out_c, (kd, 3, 3), stride, 1)?;
                in_d = g.out_d;
                in_c = out_c;
                backbone.push(b.conv(&format!("backbone.conv{}", i + 1), bb, g));
                backbone.push(relu(&format!("backbone.relu{}", i + 1)));
            }
            backbone.push(Op::AvgPool {
                name: "backbone.pool".into(),
                channels: in_c,
                positions: in_d * s * s,
            });
            hidden = in_c;
        }
        Backbone::HybridSn => {
            let (mut in_c, mut in_d) = (1, d);
            for (i, (&out_c, kd)) in ch[..3].iter().zip([7usize, 5, 3]).enumerate() {
                let g = ConvGeom::new(in_c, in_d, s, s, out_c, (kd.min(in_d), 3, 3), 1, 1)?;
                in_d = g.out_d;
                in_c = out_c;
                backbone.push(b.conv(&format!("backbone.conv3d{}", i + 1), bb, g));
                backbone.push(relu(&format!("backbone.relu3d{}", i + 1)));
            }
            let g = ConvGeom::new(in_c * in_d, 1, s, s, ch[3], (1, 3, 3), 1, 1)?;
            backbone.push(b.conv("backbone.conv2d", bb, g));
            backbone.push(relu("backbone.relu2d"));
            backbone.push(b.linear("backbone.fc1", bb, ch[3] * s * s, ch[4]));
            backbone.push(relu("backbone.relu_fc1"));
            backbone.push(b.linear("backbone.fc2", bb, ch[4], ch[5]));
            backbone.push(relu("backbone.relu_fc2"));
            hidden = ch[5];
        }
    }
    let n1 = config.feature_dim;
    let head1 = b.mlp("head1", ParamGroup::Head1, &[hidden, config.head_hidden, n1]);
    let head2 = b.mlp("head2", ParamGroup::Head2, &[hidden, config.head_hidden, n1]);
    let classifier = vec![b.linear("classifier", ParamGroup::Classifier, n1, config.class_count)];
    let disc = b.mlp(
        "disc",
        ParamGroup::Discriminator,
        &[n1, config.disc_hidden[0], config.disc_hidden[1], config.env_count],
    );
    Ok((
        Architecture {
            backbone,
            head1,
            head2,
            classifier,
            disc,
            hidden,
        },
        b,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetConfig,
    pub tensors: Vec<ParamTensor<T>>,
    arch: Architecture,
}

/// Per-tensor gradients aligned with [`NetworkParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    fn zeros_like(params: &NetworkParams<T>) -> Self {
        Gradients {
            tensors: params
                .tensors
                .iter()
                .map(|t| vec![T::zero(); t.data.len()])
                .collect(),
        }
    }

    /// Largest absolute entry over the tensors of `group`.
    pub fn max_abs_in(&self, params: &NetworkParams<T>, group: ParamGroup) -> T {
        self.tensors
            .iter()
            .zip(&params.tensors)
            .filter(|(_, p)| p.group == group)
            .flat_map(|(g, _)| g.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero
/// biases, drawn in tensor order from `config.seed`.
pub fn init_params<T: Real>(config: &NetConfig) -> Result<NetworkParams<T>> {
    let (arch, builder) = build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = builder
        .shapes
        .into_iter()
        .map(|(name, group, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![T::zero(); n]
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| cast(rng.random_range(-bound..bound))).collect()
            };
            ParamTensor {
                name,
                group,
                shape,
                data,
            }
        })
        .collect();
    Ok(NetworkParams {
        config: config.clone(),
        tensors,
        arch,
    })
}

impl<T: Real> NetworkParams<T> {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Width of the backbone output feeding both heads.
    pub fn hidden_dim(&self) -> usize {
        self.arch.hidden
    }

    /// Input/output widths of every discriminator layer.
    pub fn discriminator_shapes(&self) -> Vec<(usize, usize)> {
        self.arch
            .disc
            .iter()
            .filter_map(|op| match op {
                Op::Linear {
                    inputs, outputs, ..
                } => Some((*inputs, *outputs)),
                _ => None,
            })
            .collect()
    }

    /// Plain SGD: `theta -= lr * grad` for tensors in `groups`.
    pub fn sgd_update(&mut self, grads: &Gradients<T>, lr: T, groups: &[ParamGroup]) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.tensors) {
            if groups.contains(&t.group) {
                for (p, &d) in t.data.iter_mut().zip(g) {
                    *p = *p - lr * d;
                }
            }
        }
    }

    pub fn convert<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config.clone(),
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    group: t.group,
                    shape: t.shape.clone(),
                    data: t
                        .data
                        .iter()
                        .map(|v| cast(v.to_f64().expect("finite")))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Flat copy of all parameters in tensor order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Cached state of one op's forward pass.
#[derive(Debug, Clone)]
enum OpCache<T> {
    Conv { col: Array2<T> },
    /// Input of a linear layer.
    Linear { input: Array2<T> },
    /// Output of a ReLU.
    Relu { output: Array2<T> },
    Pool,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    ops: Vec<OpCache<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs<T> {
    pub f1_out: Array2<T>,
    pub f2_out: Array2<T>,
    pub fused: Array2<T>,
    pub class_probs: Array2<T>,
    pub env_probs: Array2<T>,
    pub hidden: Array2<T>,
    backbone: StageCache<T>,
    head1: StageCache<T>,
    head2: StageCache<T>,
    classifier: StageCache<T>,
    disc: StageCache<T>,
}

impl<T: Real> ForwardOutputs<T> {
    pub fn batch_size(&self) -> usize {
        self.class_probs.nrows()
    }

    /// Predicted class per row in `1..=Λ`; ties go to the lowest class.
    pub fn predicted_classes(&self) -> Vec<u16> {
        argmax_rows(&self.class_probs)
    }

    pub fn predicted_envs(&self) -> Vec<u16> {
        argmax_rows(&self.env_probs)
    }
}

fn argmax_rows<T: Real>(m: &Array2<T>) -> Vec<u16> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u16 + 1
        })
        .collect()
}

fn check_finite<T: Real>(m: &Array2<T>, layer: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
        })
    }
}

fn view<'a, T>(t: &'a ParamTensor<T>, rows: usize, cols: usize) -> ArrayView2<'a, T> {
    ArrayView2::from_shape((rows, cols), &t.data).expect("tensor shape")
}

fn op_forward<T: Real>(
    op: &Op,
    x: Array2<T>,
    params: &NetworkParams<T>,
) -> Result<(Array2<T>, OpCache<T>)> {
    let (y, cache) = match op {
        Op::Conv {
            geom, weight, bias, ..
        } => {
            let batch = x.nrows();
            let p = geom.positions();
            let xs = x.as_slice().expect("standard layout");
            let in_f = geom.in_features();
            let bp = batch * p;
            let mut col = vec![T::zero(); geom.k() * bp];
            geom.visit(|krow, src, dst| {
                let base = krow * bp + dst;
                for b in 0..batch {
                    col[base + b * p] = xs[b * in_f + src];
                }
            });
            let col = Array2::from_shape_vec((geom.k(), bp), col).expect("col shape");
            let w = view(&params.tensors[*weight], geom.out_c, geom.k());
            let out = w.dot(&col);
            let bias = &params.tensors[*bias].data;
            let mut y = Array2::zeros((batch, geom.out_c * p));
            {
                let ys = y.as_slice_mut().expect("standard layout");
                let os = out.as_slice().expect("standard layout");
                for o in 0..geom.out_c {
                    for b in 0..batch {
                        let dst = &mut ys[b * geom.out_c * p + o * p..][..p];
                        let src = &os[o * bp + b * p..][..p];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s + bias[o];
                        }
                    }
                }
            }
            (y, OpCache::Conv { col })
        }
        Op::Linear {
            inputs,
            outputs,
            weight,
            bias,
            ..
        } => {
            let w = view(&params.tensors[*weight], *inputs, *outputs);
            let b = Array1::from(params.tensors[*bias].data.clone());
            let y = x.dot(&w) + &b;
            (y, OpCache::Linear { input: x })
        }
        Op::Relu { .. } => {
            let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
            (y.clone(), OpCache::Relu { output: y })
        }
        Op::AvgPool {
            channels,
            positions,
            ..
        } => {
            let batch = x.nrows();
            let inv = cast::<T>(1.0 / *positions as f64);
            let xs = x.as_slice().expect("standard layout");
            let mut y = Array2::zeros((batch, *channels));
            for b in 0..batch {
                for c in 0..*channels {
                    let start = b * channels * positions + c * positions;
                    let sum: T = xs[start..start + positions].iter().copied().sum();
                    y[[b, c]] = sum * inv;
                }
            }
            (y, OpCache::Pool)
        }
    };
    check_finite(&y, op.name())?;
    Ok((y, cache))
}

/// Back-propagates `dy` through one op. Parameter gradients are accumulated
/// only when `grads` is given; the input gradient only when `need_dx`.
fn op_backward<T: Real>(
    op: &Op,
    cache: &OpCache<T>,
    dy: Array2<T>,
    params: &NetworkParams<T>,
    grads: Option<&mut Gradients<T>>,
    need_dx: bool,
) -> Option<Array2<T>> {
    match (op, cache) {
        (
            Op::Conv {
                geom, weight, bias, ..
            },
            OpCache::Conv { col },
        ) => {
            let batch = dy.nrows();
            let p = geom.positions();
            let bp = batch * p;
            let mut dout = Array2::<T>::zeros((geom.out_c, bp));
            {
                let ds = dout.as_slice_mut().expect("standard layout");
                let dys = dy.as_slice().expect("standard layout");
                for o in 0..geom.out_c {
                    for b in 0..batch {
                        ds[o * bp + b * p..][..p]
                            .copy_from_slice(&dys[b * geom.out_c * p + o * p..][..p]);
                    }
                }
            }
            if let Some(grads) = grads {
                let dw = dout.dot(&col.t());
                for (g, &v) in grads.tensors[*weight].iter_mut().zip(dw.iter()) {
                    *g = *g + v;
                }
                for (g, v) in grads.tensors[*bias].iter_mut().zip(dout.sum_axis(Axis(1))) {
                    *g = *g + v;
                }
            }
            if !need_dx {
                return None;
            }
            let w = view(&params.tensors[*weight], geom.out_c, geom.k());
            let dcol = w.t().dot(&dout);
            let dcs = dcol.as_slice().expect("standard layout");
            let in_f = geom.in_features();
            let mut dx = vec![T::zero(); batch * in_f];
            geom.visit(|krow, src, dst| {
                let base = krow * bp + dst;
                for b in 0..batch {
                    let i = b * in_f + src;
                    dx[i] = dx[i] + dcs[base + b * p];
                }
            });
            Some(Array2::from_shape_vec((batch, in_f), dx).expect("dx shape"))
        }
        (
            Op::Linear {
                inputs,
                outputs,
                weight,
                bias,
                ..
            },
            OpCache::Linear { input },
        ) => {
            if let Some(grads) = grads {
                let dw = input.t().dot(&dy);
                for (g, &v) in grads.tensors[*weight].iter_mut().zip(dw.iter()) {
                    *g = *g + v;
                }
                for (g, v) in grads.tensors[*bias].iter_mut().zip(dy.sum_axis(Axis(0))) {
                    *g = *g + v;
                }
            }
            if !need_dx {
                return None;
            }
            let w = view(&params.tensors[*weight], *inputs, *outputs);
            Some(dy.dot(&w.t()))
        }
        (Op::Relu { .. }, OpCache::Relu { output }) => {
            let mut dx = dy;
            ndarray::Zip::from(&mut dx).and(output).for_each(|d, &o| {
                if o <= T::zero() {
                    *d = T::zero();
                }
            });
            Some(dx)
        }
        (
            Op::AvgPool {
                channels,
                positions,
                ..
            },
            OpCache::Pool,
        ) => {
            let batch = dy.nrows();
            let inv = cast::<T>(1.0 / *positions as f64);
            let mut dx = Array2::zeros((batch, channels * positions));
            for b in 0..batch {
                for c in 0..*channels {
                    let v = dy[[b, c]] * inv;
                    dx.slice_mut(s![b, c * positions..(c + 1) * positions]).fill(v);
                }
            }
            Some(dx)
        }
        _ => unreachable!("op/cache mismatch"),
    }
}

fn stage_forward<T: Real>(
    ops: &[Op],
    mut x: Array2<T>,
    params: &NetworkParams<T>,
) -> Result<(Array2<T>, StageCache<T>)> {
    let mut caches = Vec::with_capacity(ops.len());
    for op in ops {
        let (y, c) = op_forward(op, x, params)?;
        caches.push(c);
        x = y;
    }
    Ok((x, StageCache { ops: caches }))
}

fn stage_backward<T: Real>(
    ops: &[Op],
    cache: &StageCache<T>,
    mut dy: Array2<T>,
    params: &NetworkParams<T>,
    mut grads: Option<&mut Gradients<T>>,
    need_dx: bool,
) -> Option<Array2<T>> {
    for (i, (op, c)) in ops.iter().zip(&cache.ops).enumerate().rev() {
        let want = need_dx || i > 0;
        match op_backward(op, c, dy, params, grads.as_deref_mut(), want) {
            Some(d) => dy = d,
            None => return None,
        }
    }
    Some(dy)
}

fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Rearranges a `[B, s*s*d]` batch of row-major `(s, s, d)` patches into the
/// channel-major `[B, d*s*s]` layout the convolutions read.
fn to_band_major<T: Real>(batch: &Array2<T>, s: usize, d: usize) -> Array2<T> {
    let n = batch.nrows();
    let mut out = Array2::zeros((n, s * s * d));
    for (src, mut dst) in batch.rows().into_iter().zip(out.rows_mut()) {
        for p in 0..s * s {
            for b in 0..d {
                dst[b * s * s + p] = src[p * d + b];
            }
        }
    }
    out
}

/// Forward pass over a `[B, s*s*d]` batch of row-major `(s, s, d)` patches.
pub fn forward<T: Real>(params: &NetworkParams<T>, batch: &Array2<T>) -> Result<ForwardOutputs<T>> {
    let cfg = &params.config;
    let width = cfg.patch_size * cfg.patch_size * cfg.bands;
    if batch.ncols() != width || batch.nrows() == 0 {
        return Err(Error::Argument(format!(
            "batch shape {:?} does not match patch {}x{}x{}",
            batch.shape(),
            cfg.patch_size,
            cfg.patch_size,
            cfg.bands
        )));
    }
    check_finite(batch, "input")?;
    let arch = &params.arch;
    let x = to_band_major(batch, cfg.patch_size, cfg.bands);
    let (hidden, backbone) = stage_forward(&arch.backbone, x, params)?;
    let (f1_out, head1) = stage_forward(&arch.head1, hidden.clone(), params)?;
    let (f2_out, head2) = stage_forward(&arch.head2, hidden.clone(), params)?;
    let fused = &f1_out * &f2_out;
    check_finite(&fused, "fusion")?;
    let (class_logits, classifier) = stage_forward(&arch.classifier, fused.clone(), params)?;
    let (env_logits, disc) = stage_forward(&arch.disc, f2_out.clone(), params)?;
    let class_probs = softmax_rows(&class_logits);
    let env_probs = softmax_rows(&env_logits);
    check_finite(&class_probs, "classifier.softmax")?;
    check_finite(&env_probs, "disc.softmax")?;
    Ok(ForwardOutputs {
        f1_out,
        f2_out,
        fused,
        class_probs,
        env_probs,
        hidden,
        backbone,
        head1,
        head2,
        classifier,
        disc,
    })
}

/// Which training loss to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTarget {
    /// `C1 - alpha * C2`, over backbone, heads and classifier; the
    /// discriminator is held fixed.
    L1,
    /// `C2`, over the discriminator only.
    L2,
    /// Plain classification loss `C1` with no discriminator branch, the
    /// vanilla baseline.
    C1,
}

impl LossTarget {
    pub fn groups(self) -> &'static [ParamGroup] {
        match self {
            LossTarget::L1 => &[
                ParamGroup::Backbone,
                ParamGroup::Head1,
                ParamGroup::Head2,
                ParamGroup::Classifier,
            ],
            LossTarget::L2 => &[ParamGroup::Discriminator],
            LossTarget::C1 => &[
                ParamGroup::Backbone,
                ParamGroup::Head1,
                ParamGroup::Head2,
                ParamGroup::Classifier,
            ],
        }
    }
}

/// `(probs - onehot(labels)) * scale`, the softmax cross-entropy gradient.
fn softmax_ce_grad<T: Real>(probs: &Array2<T>, labels: &[u16], scale: T) -> Array2<T> {
    let mut d = probs.clone();
    for (mut row, &l) in d.rows_mut().into_iter().zip(labels) {
        row[l as usize - 1] = row[l as usize - 1] - T::one();
    }
    d.mapv_inplace(|v| v * scale);
    d
}

fn check_labels(labels: &[u16], n: usize, max: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "{} {what} labels for batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as usize > max) {
        return Err(Error::Argument(format!("{what} label {bad} outside 1..={max}")));
    }
    Ok(())
}

/// Gradients of the batch-mean loss selected by `target`, given the cached
/// forward pass `out` of the same parameters.
///
/// For `L1` the discriminator is frozen: the `-alpha * C2` term flows back
/// through `g` into `f2` and the shared backbone without touching `g`'s
/// gradients. For `L2` only `g` receives gradients.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    out: &ForwardOutputs<T>,
    y: &[u16],
    z: &[u16],
    alpha: T,
    target: LossTarget,
) -> Result<Gradients<T>> {
    let n = out.batch_size();
    let arch = &params.arch;
    let inv_n = cast::<T>(1.0 / n as f64);
    let mut grads = Gradients::zeros_like(params);
    match target {
        LossTarget::C1 => {
            check_labels(y, n, params.config.class_count, "class")?;
            let d_logits = softmax_ce_grad(&out.class_probs, y, inv_n);
            let d_fused = stage_backward(
                &arch.classifier,
                &out.classifier,
                d_logits,
                params,
                Some(&mut grads),
                true,
            )
            .expect("input gradient requested");
            let d_f1 = &d_fused * &out.f2_out;
            let d_f2 = &d_fused * &out.f1_out;
            let d_h1 = stage_backward(&arch.head1, &out.head1, d_f1, params, Some(&mut grads), true)
                .expect("input gradient requested");
            let d_h2 = stage_backward(&arch.head2, &out.head2, d_f2, params, Some(&mut grads), true)
                .expect("input gradient requested");
            stage_backward(
                &arch.backbone,
                &out.backbone,
                d_h1 + d_h2,
                params,
                Some(&mut grads),
                false,
            );
        }
        LossTarget::L1 => {
            if alpha < T::zero() {
                return Err(Error::Argument(format!("alpha must be >= 0, got {alpha}")));
            }
            check_labels(y, n, params.config.class_count, "class")?;
            check_labels(z, n, params.config.env_count, "environment")?;
            let d_logits = softmax_ce_grad(&out.class_probs, y, inv_n);
            let d_fused = stage_backward(
                &arch.classifier,
                &out.classifier,
                d_logits,
                params,
                Some(&mut grads),
                true,
            )
            .expect("input gradient requested");
            let d_f1 = &d_fused * &out.f2_out;
            let mut d_f2 = &d_fused * &out.f1_out;
            let d_env = softmax_ce_grad(&out.env_probs, z, -alpha * inv_n);
            let d_f2_adv = stage_backward(&arch.disc, &out.disc, d_env, params, None, true)
                .expect("input gradient requested");
            d_f2 = d_f2 + d_f2_adv;
            let d_h1 = stage_backward(&arch.head1, &out.head1, d_f1, params, Some(&mut grads), true)
                .expect("input gradient requested");
            let d_h2 = stage_backward(&arch.head2, &out.head2, d_f2, params, Some(&mut grads), true)
                .expect("input gradient requested");
            stage_backward(
                &arch.backbone,
                &out.backbone,
                d_h1 + d_h2,
                params,
                Some(&mut grads),
                false,
            );
        }
        LossTarget::L2 => {
            check_labels(z, n, params.config.env_count, "environment")?;
            let d_env = softmax_ce_grad(&out.env_probs, z, inv_n);
            stage_backward(&arch.disc, &out.disc, d_env, params, Some(&mut grads), false);
        }
    }
    for (g, t) in grads.tensors.iter().zip(&params.tensors) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: format!("grad:{}", t.name),
            });
        }
    }
    Ok(grads)
}

/// Forward and backward in one call.
pub fn gradients<T: Real>(
    params: &NetworkParams<T>,
    batch: &Array2<T>,
    y: &[u16],
    z: &[u16],
    alpha: T,
    target: LossTarget,
) -> Result<Gradients<T>> {
    let out = forward(params, batch)?;
    backward(params, &out, y, z, alpha, target)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: NetConfig,
    pub tensors: Vec<TensorEntry>,
    pub dtype: String,
    pub endianness: String,
    pub step: usize,
}

/// Writes `checkpoint.json` and `params.bin` (little-endian `f32` tensors,
/// concatenated in manifest order).
pub fn save_checkpoint<T: Real>(params: &NetworkParams<T>, step: usize, dir: &Path) -> Result<()> {
    data::create_dir(dir)?;
    let manifest = CheckpointManifest {
        config: params.config.clone(),
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        dtype: "f32".into(),
        endianness: "little".into(),
        step,
    };
    data::write_json(&dir.join(CHECKPOINT_FILE), &manifest)?;
    let flat: Vec<f32> = params
        .flatten()
        .iter()
        .map(|v| v.to_f32().expect("finite"))
        .collect();
    data::write_f32_le(&dir.join(PARAMS_FILE), &flat)
}

/// Loads a checkpoint, checking names and shapes against the architecture
/// implied by its config. Returns the parameters and the training step.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(NetworkParams<T>, usize)> {
    let path = dir.join(CHECKPOINT_FILE);
    let manifest: CheckpointManifest = data::read_json(&path)?;
    if manifest.dtype != "f32" || manifest.endianness != "little" {
        return Err(Error::Format {
            path,
            msg: "expected little-endian f32 tensors".into(),
        });
    }
    let mut params = init_params::<T>(&manifest.config)?;
    if manifest.tensors.len() != params.tensors.len() {
        return Err(Error::Validation(format!(
            "checkpoint lists {} tensors, config implies {}",
            manifest.tensors.len(),
            params.tensors.len()
        )));
    }
    for (entry, t) in manifest.tensors.iter().zip(&params.tensors) {
        if entry.name != t.name || entry.shape != t.shape {
            return Err(Error::Validation(format!(
                "tensor {} {:?} does not match architecture {} {:?}",
                entry.name, entry.shape, t.name, t.shape
            )));
        }
    }
    let flat = data::read_f32_le(&dir.join(PARAMS_FILE), params.parameter_count())?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite parameter in checkpoint".into()));
    }
    let mut it = flat.into_iter();
    for t in params.tensors.iter_mut() {
        for v in t.data.iter_mut() {
            *v = cast(it.next().expect("length checked") as f64);
        }
    }
    Ok((params, manifest.step))
}
