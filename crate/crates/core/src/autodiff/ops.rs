//! The op catalogue: attributes, forward kernels and first-order vector-Jacobian products.

use super::conv::{self, Geometry};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics passed as extra inputs.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `x [B, in]`, `w [out, in]`, optional `b [out]`.
    Linear,
    /// `a [n, k]`, `b [k, m]`.
    MatMul,
    /// `x [B, Cin, H, W]`, `w [Cout, Cin, kh, kw]`, optional `b [Cout]`.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// `x [B, Cin, H, W]`, `w [Cin, Cout, kh, kw]`, optional `b [Cout]`.
    ConvTranspose2d {
        stride: usize,
        pad: usize,
        output_pad: usize,
    },
    /// Train: `x, gamma, beta`. Eval: `x, gamma, beta, running_mean, running_var`.
    BatchNorm2d {
        mode: NormMode,
        eps: f64,
    },
    InstanceNorm2d {
        eps: f64,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Sigmoid,
    Add,
    Mul,
    Scale {
        factor: f64,
    },
    Concat {
        axis: usize,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
    /// Repeats size-1 axes up to `shape` (same rank).
    Broadcast {
        shape: Vec<usize>,
    },
    GlobalAvgPool,
    /// Aligned-corners bilinear resampling of `[B, C, H, W]`.
    BilinearResize {
        height: usize,
        width: usize,
    },
    L1Loss,
    MseLoss,
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    Sum,
    Mean,
    Sqrt,
    /// Per-sample Euclidean norm: `[B, ...] -> [B, 1]`.
    Norm2,
}

/// Loosely typed attributes for name-based construction of ops.
#[derive(Debug, Clone, Default)]
pub struct OpAttrs {
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    pub output_pad: Option<usize>,
    pub slope: Option<f64>,
    pub factor: Option<f64>,
    pub axis: Option<usize>,
    pub eps: Option<f64>,
    pub train: Option<bool>,
    pub shape: Option<Vec<usize>>,
    pub labels: Option<Vec<usize>>,
}

impl Op {
    pub const CATALOGUE: &'static [&'static str] = &[
        "linear",
        "matmul",
        "conv2d",
        "conv_transpose2d",
        "batchnorm2d",
        "instancenorm2d",
        "relu",
        "leaky_relu",
        "tanh",
        "sigmoid",
        "add",
        "mul",
        "scale",
        "concat",
        "flatten",
        "reshape",
        "broadcast",
        "global_avg_pool",
        "bilinear_resize",
        "l1_loss",
        "mse_loss",
        "softmax_cross_entropy",
        "sum",
        "mean",
        "sqrt",
        "norm2",
    ];

    pub fn by_name(name: &str, attrs: &OpAttrs) -> Result<Op> {
        let need = |what: &str| Error::Contract(format!("op `{name}` requires attribute `{what}`"));
        Ok(match name {
            "linear" => Op::Linear,
            "matmul" => Op::MatMul,
            "conv2d" => Op::Conv2d {
                stride: attrs.stride.unwrap_or(1),
                pad: attrs.pad.unwrap_or(0),
            },
            "conv_transpose2d" => Op::ConvTranspose2d {
                stride: attrs.stride.unwrap_or(1),
                pad: attrs.pad.unwrap_or(0),
                output_pad: attrs.output_pad.unwrap_or(0),
            },
            "batchnorm2d" => Op::BatchNorm2d {
                mode: if attrs.train.unwrap_or(true) {
                    NormMode::Train
                } else {
                    NormMode::Eval
                },
                eps: attrs.eps.unwrap_or(1e-5),
            },
            "instancenorm2d" => Op::InstanceNorm2d {
                eps: attrs.eps.unwrap_or(1e-5),
            },
            "relu" => Op::Relu,
            "leaky_relu" => Op::LeakyRelu {
                slope: attrs.slope.unwrap_or(0.2),
            },
            "tanh" => Op::Tanh,
            "sigmoid" => Op::Sigmoid,
            "add" => Op::Add,
            "mul" => Op::Mul,
            "scale" => Op::Scale {
                factor: attrs.factor.ok_or_else(|| need("factor"))?,
            },
            "concat" => Op::Concat {
                axis: attrs.axis.unwrap_or(1),
            },
            "flatten" => Op::Flatten,
            "reshape" => Op::Reshape {
                shape: attrs.shape.clone().ok_or_else(|| need("shape"))?,
            },
            "broadcast" => Op::Broadcast {
                shape: attrs.shape.clone().ok_or_else(|| need("shape"))?,
            },
            "global_avg_pool" => Op::GlobalAvgPool,
            "bilinear_resize" => {
                let shape = attrs.shape.clone().ok_or_else(|| need("shape"))?;
                if shape.len() != 2 {
                    return Err(need("shape = [height, width]"));
                }
                Op::BilinearResize {
                    height: shape[0],
                    width: shape[1],
                }
            }
            "l1_loss" => Op::L1Loss,
            "mse_loss" => Op::MseLoss,
            "softmax_cross_entropy" => Op::SoftmaxCrossEntropy {
                labels: attrs.labels.clone().ok_or_else(|| need("labels"))?,
            },
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "sqrt" => Op::Sqrt,
            "norm2" => Op::Norm2,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Linear => "linear",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm2d { .. } => "batchnorm2d",
            Op::InstanceNorm2d { .. } => "instancenorm2d",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Flatten => "flatten",
            Op::Reshape { .. } => "reshape",
            Op::Broadcast { .. } => "broadcast",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::BilinearResize { .. } => "bilinear_resize",
            Op::L1Loss => "l1_loss",
            Op::MseLoss => "mse_loss",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Sqrt => "sqrt",
            Op::Norm2 => "norm2",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Linear | Op::Conv2d { .. } | Op::ConvTranspose2d { .. } => 2..=3,
            Op::BatchNorm2d {
                mode: NormMode::Train,
                ..
            } => 3..=3,
            Op::BatchNorm2d {
                mode: NormMode::Eval,
                ..
            } => 5..=5,
            Op::MatMul | Op::Add | Op::Mul | Op::L1Loss | Op::MseLoss => 2..=2,
            Op::Concat { .. } => 1..=usize::MAX,
            _ => 1..=1,
        }
    }
}

/// Intermediates kept by the forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) enum Saved<T> {
    #[default]
    Nothing,
    Columns(Vec<T>),
    Normalized {
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Probabilities(Vec<T>),
}

/// Per-channel statistics of a training-mode batch norm (biased mean/var over `B, H, W`).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel, for the unbiased running-variance update.
    pub count: usize,
}

pub(crate) struct Forward<T> {
    pub value: Tensor<T>,
    pub saved: Saved<T>,
    pub stats: Option<BatchStats<T>>,
}

impl<T> Forward<T> {
    fn plain(value: Tensor<T>) -> Self {
        Self {
            value,
            saved: Saved::Nothing,
            stats: None,
        }
    }
}

fn dims4(op: &'static str, t: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [B, C, H, W], got {t:?}"),
        )),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn conv2d_geometry<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Geometry, usize)> {
    let (b, c, h, wd) = dims4("conv2d", x.shape())?;
    let (co, ci, kh, kw) = dims4("conv2d", w.shape())?;
    if ci != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {ci}"),
        ));
    }
    if let Some(bias) = bias {
        same_shape("conv2d", bias.shape(), &[co])?;
    }
    let out_h = conv::conv_out_size(h, kh, stride, pad);
    let out_w = conv::conv_out_size(wd, kw, stride, pad);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}, stride {stride}"),
        ));
    };
    Ok((
        Geometry {
            batch: b,
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        },
        co,
    ))
}

fn conv_transpose_geometry<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<(Geometry, usize)> {
    let (b, c, h, wd) = dims4("conv_transpose2d", x.shape())?;
    let (ci, co, kh, kw) = dims4("conv_transpose2d", w.shape())?;
    if ci != c {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input has {c} channels, kernel expects {ci}"),
        ));
    }
    if let Some(bias) = bias {
        same_shape("conv_transpose2d", bias.shape(), &[co])?;
    }
    if stride == 0 || output_pad >= stride {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("output_pad {output_pad} must be below stride {stride}"),
        ));
    }
    let out_h = conv::conv_transpose_out_size(h, kh, stride, pad, output_pad);
    let out_w = conv::conv_transpose_out_size(wd, kw, stride, pad, output_pad);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::shape("conv_transpose2d", "padding exceeds output"));
    };
    Ok((
        conv::transpose_geometry(b, co, h, wd, out_h, out_w, (kh, kw), stride, pad),
        c,
    ))
}

fn elementwise<T: Float>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

fn leaky<T: Float>(slope: f64) -> impl Fn(T) -> T {
    let s = T::of(slope);
    move |v| if v > T::zero() { v } else { v * s }
}

fn normalize_groups<T: Float>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    per_sample: bool,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    // Groups are channels (batch norm) or (sample, channel) pairs (instance norm).
    let groups = if per_sample {
        batch * channels
    } else {
        channels
    };
    let count = if per_sample { plane } else { batch * plane };
    let n = T::of(count as f64);
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    let group_of = |b: usize, c: usize| if per_sample { b * channels + c } else { c };
    for b in 0..batch {
        for c in 0..channels {
            let g = group_of(b, c);
            let s: T = x[(b * channels + c) * plane..(b * channels + c + 1) * plane]
                .iter()
                .copied()
                .sum();
            mean[g] += s;
        }
    }
    for m in &mut mean {
        *m = *m / n;
    }
    for b in 0..batch {
        for c in 0..channels {
            let g = group_of(b, c);
            let mu = mean[g];
            let s: T = x[(b * channels + c) * plane..(b * channels + c + 1) * plane]
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum();
            var[g] += s;
        }
    }
    for v in &mut var {
        *v = *v / n;
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::of(eps)).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let g = group_of(b, c);
            let range = (b * channels + c) * plane..(b * channels + c + 1) * plane;
            for (o, &v) in xhat[range.clone()].iter_mut().zip(&x[range]) {
                *o = (v - mean[g]) * inv_std[g];
            }
        }
    }
    (xhat, inv_std, mean, var)
}

/// Backward of `xhat = (x - mean) * inv_std` for each group, given `d loss / d xhat`.
fn normalize_groups_backward<T: Float>(
    gxhat: &[T],
    xhat: &[T],
    inv_std: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    per_sample: bool,
) -> Vec<T> {
    let groups = inv_std.len();
    let count = if per_sample { plane } else { batch * plane };
    let n = T::of(count as f64);
    let group_of = |b: usize, c: usize| if per_sample { b * channels + c } else { c };
    let mut sum_g = vec![T::zero(); groups];
    let mut sum_gx = vec![T::zero(); groups];
    for b in 0..batch {
        for c in 0..channels {
            let g = group_of(b, c);
            let range = (b * channels + c) * plane..(b * channels + c + 1) * plane;
            for (&gv, &xv) in gxhat[range.clone()].iter().zip(&xhat[range]) {
                sum_g[g] += gv;
                sum_gx[g] += gv * xv;
            }
        }
    }
    let mut gx = vec![T::zero(); gxhat.len()];
    for b in 0..batch {
        for c in 0..channels {
            let g = group_of(b, c);
            let scale = inv_std[g] / n;
            let range = (b * channels + c) * plane..(b * channels + c + 1) * plane;
            for ((o, &gv), &xv) in gx[range.clone()]
                .iter_mut()
                .zip(&gxhat[range.clone()])
                .zip(&xhat[range])
            {
                *o = scale * (n * gv - sum_g[g] - xv * sum_gx[g]);
            }
        }
    }
    gx
}

/// Source index pair and weight for aligned-corners bilinear sampling along one axis.
pub(crate) fn bilinear_taps(out: usize, src: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            let pos = if out == 1 || src == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_resize_forward<T: Float>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                dst[i * ow + j] = gy * (gx * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * (gx * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            }
        }
    }
    out
}

fn bilinear_resize_backward<T: Float>(
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                let v = src[i * ow + j];
                dst[y0 * w + x0] += v * gy * gx;
                dst[y0 * w + x1] += v * gy * fx;
                dst[y1 * w + x0] += v * fy * gx;
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    out
}

fn broadcast_index(shape: &[usize], target: &[usize], mut flat: usize) -> usize {
    // Maps a flat index of `target` to the flat index of `shape` (size-1 axes repeat).
    let mut src = 0;
    let mut stride = 1;
    for axis in (0..target.len()).rev() {
        let coord = flat % target[axis];
        flat /= target[axis];
        if shape[axis] != 1 {
            src += coord * stride;
        }
        stride *= shape[axis];
    }
    src
}

pub(crate) fn forward<T: Float>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Forward<T>> {
    if !op.arity().contains(&inputs.len()) {
        return Err(Error::shape(
            op.name(),
            format!("takes {:?} inputs, got {}", op.arity(), inputs.len()),
        ));
    }
    let x = inputs[0];
    let out = match op {
        Op::Linear => {
            let (w, bias) = (inputs[1], inputs.get(2));
            let (&[b, fin], &[fout, win]) = (x.shape(), w.shape()) else {
                return Err(Error::shape(
                    "linear",
                    format!("x {:?}, w {:?}", x.shape(), w.shape()),
                ));
            };
            if fin != win {
                return Err(Error::shape(
                    "linear",
                    format!("x has {fin} features, w expects {win}"),
                ));
            }
            let mut out = vec![T::zero(); b * fout];
            if let Some(bias) = bias {
                same_shape("linear", bias.shape(), &[fout])?;
                for row in out.chunks_mut(fout) {
                    row.copy_from_slice(bias.data());
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                b,
                fin,
                fout,
                T::one(),
                x.data(),
                fin,
                1,
                w.data(),
                1,
                fin,
                beta,
                &mut out,
                fout,
                1,
            );
            Forward::plain(Tensor::from_parts(vec![b, fout], out))
        }
        Op::MatMul => {
            let y = inputs[1];
            let (&[n, k], &[k2, m]) = (x.shape(), y.shape()) else {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", x.shape(), y.shape()),
                ));
            };
            if k != k2 {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", x.shape(), y.shape()),
                ));
            }
            let mut out = vec![T::zero(); n * m];
            T::gemm(
                n,
                k,
                m,
                T::one(),
                x.data(),
                k,
                1,
                y.data(),
                m,
                1,
                T::zero(),
                &mut out,
                m,
                1,
            );
            Forward::plain(Tensor::from_parts(vec![n, m], out))
        }
        Op::Conv2d { stride, pad } => {
            let bias = inputs.get(2).copied();
            let (g, co) = conv2d_geometry(x, inputs[1], bias, *stride, *pad)?;
            let res =
                conv::conv2d_forward(x.data(), inputs[1].data(), bias.map(|b| b.data()), &g, co);
            Forward {
                value: Tensor::from_parts(vec![g.batch, co, g.out_h, g.out_w], res.out),
                saved: Saved::Columns(res.col),
                stats: None,
            }
        }
        Op::ConvTranspose2d {
            stride,
            pad,
            output_pad,
        } => {
            let bias = inputs.get(2).copied();
            let (g, ci) = conv_transpose_geometry(x, inputs[1], bias, *stride, *pad, *output_pad)?;
            let out = conv::conv_transpose2d_forward(
                x.data(),
                inputs[1].data(),
                bias.map(|b| b.data()),
                &g,
                ci,
            );
            Forward::plain(Tensor::from_parts(
                vec![g.batch, g.channels, g.height, g.width],
                out,
            ))
        }
        Op::BatchNorm2d { mode, eps } => {
            let (b, c, h, w) = dims4("batchnorm2d", x.shape())?;
            for t in &inputs[1..] {
                same_shape("batchnorm2d", t.shape(), &[c])?;
            }
            let (gamma, beta) = (inputs[1].data(), inputs[2].data());
            let plane = h * w;
            let (xhat, inv_std, stats) = match mode {
                NormMode::Train => {
                    let (xhat, inv_std, mean, var) =
                        normalize_groups(x.data(), b, c, plane, false, *eps);
                    (
                        xhat,
                        inv_std,
                        Some(BatchStats {
                            mean,
                            var,
                            count: b * plane,
                        }),
                    )
                }
                NormMode::Eval => {
                    let (rm, rv) = (inputs[3].data(), inputs[4].data());
                    let inv_std: Vec<T> = rv
                        .iter()
                        .map(|&v| T::one() / (v + T::of(*eps)).sqrt())
                        .collect();
                    let mut xhat = vec![T::zero(); x.numel()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                            for (o, &v) in xhat[r.clone()].iter_mut().zip(&x.data()[r]) {
                                *o = (v - rm[ci]) * inv_std[ci];
                            }
                        }
                    }
                    (xhat, inv_std, None)
                }
            };
            let mut out = vec![T::zero(); x.numel()];
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                    for (o, &v) in out[r.clone()].iter_mut().zip(&xhat[r]) {
                        *o = gamma[ci] * v + beta[ci];
                    }
                }
            }
            Forward {
                value: Tensor::from_parts(x.shape().to_vec(), out),
                saved: Saved::Normalized { xhat, inv_std },
                stats,
            }
        }
        Op::InstanceNorm2d { eps } => {
            let (b, c, h, w) = dims4("instancenorm2d", x.shape())?;
            let (xhat, inv_std, _, _) = normalize_groups(x.data(), b, c, h * w, true, *eps);
            Forward {
                value: Tensor::from_parts(x.shape().to_vec(), xhat.clone()),
                saved: Saved::Normalized { xhat, inv_std },
                stats: None,
            }
        }
        Op::Relu => Forward::plain(elementwise(x, leaky(0.0))),
        Op::LeakyRelu { slope } => Forward::plain(elementwise(x, leaky(*slope))),
        Op::Tanh => Forward::plain(elementwise(x, |v| v.tanh())),
        Op::Sigmoid => Forward::plain(elementwise(x, |v| T::one() / (T::one() + (-v).exp()))),
        Op::Add | Op::Mul => {
            let y = inputs[1];
            same_shape(op.name(), x.shape(), y.shape())?;
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| if matches!(op, Op::Add) { a + b } else { a * b })
                .collect();
            Forward::plain(Tensor::from_parts(x.shape().to_vec(), data))
        }
        Op::Scale { factor } => {
            let f = T::of(*factor);
            Forward::plain(elementwise(x, |v| v * f))
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let rank = x.rank();
            if axis >= rank {
                return Err(Error::shape(
                    "concat",
                    format!("axis {axis} of rank {rank}"),
                ));
            }
            for t in &inputs[1..] {
                let ok = t.rank() == rank
                    && (0..rank).all(|a| a == axis || t.shape()[a] == x.shape()[a]);
                if !ok {
                    return Err(Error::shape(
                        "concat",
                        format!("{:?} vs {:?}", x.shape(), t.shape()),
                    ));
                }
            }
            let outer: usize = x.shape()[..axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
            let mut data = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = total_axis;
            Forward::plain(Tensor::from_parts(shape, data))
        }
        Op::Flatten => {
            if x.rank() < 2 {
                return Err(Error::shape("flatten", format!("rank {} < 2", x.rank())));
            }
            let b = x.shape()[0];
            Forward::plain(x.reshape(vec![b, x.numel() / b])?)
        }
        Op::Reshape { shape } => Forward::plain(x.reshape(shape.clone())?),
        Op::Broadcast { shape } => {
            let ok = shape.len() == x.rank()
                && x.shape().iter().zip(shape).all(|(&s, &t)| s == t || s == 1);
            if !ok {
                return Err(Error::shape(
                    "broadcast",
                    format!("{:?} -> {shape:?}", x.shape()),
                ));
            }
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|i| x.data()[broadcast_index(x.shape(), shape, i)])
                .collect();
            Forward::plain(Tensor::from_parts(shape.clone(), data))
        }
        Op::GlobalAvgPool => {
            let (b, c, h, w) = dims4("global_avg_pool", x.shape())?;
            let inv = T::of(1.0 / (h * w) as f64);
            let data = x
                .data()
                .chunks(h * w)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            Forward::plain(Tensor::from_parts(vec![b, c], data))
        }
        Op::BilinearResize { height, width } => {
            let (b, c, h, w) = dims4("bilinear_resize", x.shape())?;
            if *height == 0 || *width == 0 {
                return Err(Error::shape("bilinear_resize", "zero target size"));
            }
            let data = bilinear_resize_forward(x.data(), b * c, h, w, *height, *width);
            Forward::plain(Tensor::from_parts(vec![b, c, *height, *width], data))
        }
        Op::L1Loss | Op::MseLoss => {
            let y = inputs[1];
            same_shape(op.name(), x.shape(), y.shape())?;
            let n = T::of(x.numel() as f64);
            let s: T = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| {
                    let d = a - b;
                    if matches!(op, Op::L1Loss) {
                        d.abs()
                    } else {
                        d * d
                    }
                })
                .sum();
            Forward::plain(Tensor::scalar(s / n))
        }
        Op::SoftmaxCrossEntropy { labels } => {
            let &[b, k] = x.shape() else {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("logits {:?}", x.shape()),
                ));
            };
            if labels.len() != b {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("{} labels for {b} rows", labels.len()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("label {bad} >= {k} classes"),
                ));
            }
            let mut probs = vec![T::zero(); b * k];
            let mut total = T::zero();
            for (i, (row, &label)) in x.data().chunks(k).zip(labels).enumerate() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
                let z: T = exps.iter().copied().sum();
                for (p, e) in probs[i * k..(i + 1) * k].iter_mut().zip(&exps) {
                    *p = *e / z;
                }
                total += z.ln() + max - row[label];
            }
            Forward {
                value: Tensor::scalar(total / T::of(b as f64)),
                saved: Saved::Probabilities(probs),
                stats: None,
            }
        }
        Op::Sum => Forward::plain(Tensor::scalar(x.data().iter().copied().sum())),
        Op::Mean => Forward::plain(Tensor::scalar(
            x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64),
        )),
        Op::Sqrt => {
            if x.data().iter().any(|&v| v < T::zero()) {
                return Err(Error::Contract("sqrt of a negative value".into()));
            }
            Forward::plain(elementwise(x, |v| v.sqrt()))
        }
        Op::Norm2 => {
            if x.rank() < 1 {
                return Err(Error::shape("norm2", "scalar input"));
            }
            let b = x.shape()[0];
            let data = x
                .data()
                .chunks(x.numel() / b)
                .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect();
            Forward::plain(Tensor::from_parts(vec![b, 1], data))
        }
    };
    Ok(out)
}

/// First-order vector-Jacobian product. `needs[i]` marks inputs that want a gradient.
pub(crate) fn backward<T: Float>(
    op: &Op,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &Saved<T>,
    grad: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let x = inputs[0];
    let mut out: Vec<Option<Vec<T>>> = vec![None; inputs.len()];
    let zip_map = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> {
        a.iter().zip(grad).map(|(&v, &g)| f(v, g)).collect()
    };
    match op {
        Op::Linear => {
            let w = inputs[1];
            let (b, fin) = (x.shape()[0], x.shape()[1]);
            let fout = w.shape()[0];
            if needs[0] {
                let mut gx = vec![T::zero(); b * fin];
                T::gemm(
                    b,
                    fout,
                    fin,
                    T::one(),
                    grad,
                    fout,
                    1,
                    w.data(),
                    fin,
                    1,
                    T::zero(),
                    &mut gx,
                    fin,
                    1,
                );
                out[0] = Some(gx);
            }
            if needs[1] {
                let mut gw = vec![T::zero(); fout * fin];
                T::gemm(
                    fout,
                    b,
                    fin,
                    T::one(),
                    grad,
                    1,
                    fout,
                    x.data(),
                    fin,
                    1,
                    T::zero(),
                    &mut gw,
                    fin,
                    1,
                );
                out[1] = Some(gw);
            }
            if inputs.len() == 3 && needs[2] {
                let mut gb = vec![T::zero(); fout];
                for row in grad.chunks(fout) {
                    for (a, &g) in gb.iter_mut().zip(row) {
                        *a += g;
                    }
                }
                out[2] = Some(gb);
            }
        }
        Op::MatMul => {
            let y = inputs[1];
            let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            if needs[0] {
                let mut ga = vec![T::zero(); n * k];
                T::gemm(
                    n,
                    m,
                    k,
                    T::one(),
                    grad,
                    m,
                    1,
                    y.data(),
                    1,
                    m,
                    T::zero(),
                    &mut ga,
                    k,
                    1,
                );
                out[0] = Some(ga);
            }
            if needs[1] {
                let mut gb = vec![T::zero(); k * m];
                T::gemm(
                    k,
                    n,
                    m,
                    T::one(),
                    x.data(),
                    1,
                    k,
                    grad,
                    m,
                    1,
                    T::zero(),
                    &mut gb,
                    m,
                    1,
                );
                out[1] = Some(gb);
            }
        }
        Op::Conv2d { stride, pad } => {
            let bias = inputs.get(2).copied();
            let (g, co) =
                conv2d_geometry(x, inputs[1], bias, *stride, *pad).expect("validated in forward");
            let Saved::Columns(col) = saved else {
                unreachable!("conv2d saves its columns")
            };
            let n = [needs[0], needs[1], needs.get(2).copied().unwrap_or(false)];
            let r = conv::conv2d_backward(grad, inputs[1].data(), col, &g, co, n);
            out[0] = r.x;
            out[1] = r.w;
            if inputs.len() == 3 {
                out[2] = r.bias;
            }
        }
        Op::ConvTranspose2d {
            stride,
            pad,
            output_pad,
        } => {
            let bias = inputs.get(2).copied();
            let (g, ci) = conv_transpose_geometry(x, inputs[1], bias, *stride, *pad, *output_pad)
                .expect("validated in forward");
            let n = [needs[0], needs[1], needs.get(2).copied().unwrap_or(false)];
            let r = conv::conv_transpose2d_backward(grad, x.data(), inputs[1].data(), &g, ci, n);
            out[0] = r.x;
            out[1] = r.w;
            if inputs.len() == 3 {
                out[2] = r.bias;
            }
        }
        Op::BatchNorm2d { mode, .. } => {
            let Saved::Normalized { xhat, inv_std } = saved else {
                unreachable!("batchnorm saves its normalized input")
            };
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let plane = h * w;
            let gamma = inputs[1].data();
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            let mut gxhat = vec![T::zero(); x.numel()];
            for bi in 0..b {
                for ci in 0..c {
                    let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                    for ((o, &g), &xh) in gxhat[r.clone()]
                        .iter_mut()
                        .zip(&grad[r.clone()])
                        .zip(&xhat[r])
                    {
                        *o = g * gamma[ci];
                        ggamma[ci] += g * xh;
                        gbeta[ci] += g;
                    }
                }
            }
            if *mode == NormMode::Eval && (needs[3] || needs[4]) {
                // y = gamma (x - m) s + beta with s = (v + eps)^-1/2.
                let mut gmean = vec![T::zero(); c];
                let mut gvar = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let r = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
                        for (&gx, &xh) in gxhat[r.clone()].iter().zip(&xhat[r]) {
                            gmean[ci] -= gx * inv_std[ci];
                            gvar[ci] -= T::of(0.5) * gx * xh * inv_std[ci] * inv_std[ci];
                        }
                    }
                }
                out[3] = needs[3].then_some(gmean);
                out[4] = needs[4].then_some(gvar);
            }
            if needs[0] {
                out[0] = Some(match mode {
                    NormMode::Train => {
                        normalize_groups_backward(&gxhat, xhat, inv_std, b, c, plane, false)
                    }
                    NormMode::Eval => {
                        let mut gx = gxhat;
                        for bi in 0..b {
                            for (ci, &s) in inv_std.iter().enumerate() {
                                for v in &mut gx[(bi * c + ci) * plane..(bi * c + ci + 1) * plane] {
                                    *v *= s;
                                }
                            }
                        }
                        gx
                    }
                });
            }
            if needs[1] {
                out[1] = Some(ggamma);
            }
            if needs[2] {
                out[2] = Some(gbeta);
            }
        }
        Op::InstanceNorm2d { .. } => {
            let Saved::Normalized { xhat, inv_std } = saved else {
                unreachable!("instancenorm saves its normalized input")
            };
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            out[0] = Some(normalize_groups_backward(
                grad,
                xhat,
                inv_std,
                b,
                c,
                h * w,
                true,
            ));
        }
        Op::Relu | Op::LeakyRelu { .. } => {
            let slope = match op {
                Op::LeakyRelu { slope } => T::of(*slope),
                _ => T::zero(),
            };
            out[0] = Some(zip_map(x.data(), &|v, g| {
                if v > T::zero() {
                    g
                } else {
                    g * slope
                }
            }));
        }
        Op::Tanh => out[0] = Some(zip_map(output.data(), &|y, g| g * (T::one() - y * y))),
        Op::Sigmoid => out[0] = Some(zip_map(output.data(), &|y, g| g * y * (T::one() - y))),
        Op::Add => {
            for i in 0..2 {
                if needs[i] {
                    out[i] = Some(grad.to_vec());
                }
            }
        }
        Op::Mul => {
            if needs[0] {
                out[0] = Some(zip_map(inputs[1].data(), &|v, g| v * g));
            }
            if needs[1] {
                out[1] = Some(zip_map(x.data(), &|v, g| v * g));
            }
        }
        Op::Scale { factor } => {
            let f = T::of(*factor);
            out[0] = Some(grad.iter().map(|&g| g * f).collect());
        }
        Op::Concat { axis } => {
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let total: usize = output.shape()[*axis] * inner;
            let mut offset = 0;
            for (i, t) in inputs.iter().enumerate() {
                let chunk = t.shape()[*axis] * inner;
                if needs[i] {
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        g.extend_from_slice(&grad[o * total + offset..o * total + offset + chunk]);
                    }
                    out[i] = Some(g);
                }
                offset += chunk;
            }
        }
        Op::Flatten | Op::Reshape { .. } => out[0] = Some(grad.to_vec()),
        Op::Broadcast { shape } => {
            let mut g = vec![T::zero(); x.numel()];
            for (i, &v) in grad.iter().enumerate() {
                g[broadcast_index(x.shape(), shape, i)] += v;
            }
            out[0] = Some(g);
        }
        Op::GlobalAvgPool => {
            let plane = x.shape()[2] * x.shape()[3];
            let inv = T::of(1.0 / plane as f64);
            out[0] = Some(
                grad.iter()
                    .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
                    .collect(),
            );
        }
        Op::BilinearResize { height, width } => {
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            out[0] = Some(bilinear_resize_backward(grad, b * c, h, w, *height, *width));
        }
        Op::L1Loss | Op::MseLoss => {
            let y = inputs[1];
            let scale = grad[0] / T::of(x.numel() as f64);
            let ga: Vec<T> = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| {
                    let d = a - b;
                    if matches!(op, Op::L1Loss) {
                        let s = if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        s * scale
                    } else {
                        T::of(2.0) * d * scale
                    }
                })
                .collect();
            if needs[1] {
                out[1] = Some(ga.iter().map(|&v| -v).collect());
            }
            if needs[0] {
                out[0] = Some(ga);
            }
        }
        Op::SoftmaxCrossEntropy { labels } => {
            let Saved::Probabilities(probs) = saved else {
                unreachable!("cross entropy saves its probabilities")
            };
            let k = x.shape()[1];
            let scale = grad[0] / T::of(labels.len() as f64);
            let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                g[i * k + l] -= scale;
            }
            out[0] = Some(g);
        }
        Op::Sum => out[0] = Some(vec![grad[0]; x.numel()]),
        Op::Mean => out[0] = Some(vec![grad[0] / T::of(x.numel() as f64); x.numel()]),
        Op::Sqrt => out[0] = Some(zip_map(output.data(), &|y, g| g / (T::of(2.0) * y))),
        Op::Norm2 => {
            let b = x.shape()[0];
            let row = x.numel() / b;
            let mut g = vec![T::zero(); x.numel()];
            for i in 0..b {
                let norm = output.data()[i];
                if norm > T::zero() {
                    let s = grad[i] / norm;
                    for (o, &v) in g[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&x.data()[i * row..(i + 1) * row])
                    {
                        *o = v * s;
                    }
                }
            }
            out[0] = Some(g);
        }
    }
    for (o, &need) in out.iter_mut().zip(needs) {
        if !need {
            *o = None;
        }
    }
    out
}
