//! im2col-based convolution kernels (NCHW, zero padding).
//!
//! Column matrices are laid out as `[(c, ky, kx), (b, oy, ox)]` so a whole
//! batch goes through one matrix product.

use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spatial size of the sliding-window grid.
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Output extent of a strided window sweep, `None` when the kernel does not fit.
pub(crate) fn conv_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution.
pub(crate) fn conv_transpose_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel + output_pad;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies inside the image.
fn valid_range(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = (g.width + g.pad)
        .saturating_sub(kx)
        .div_ceil(g.stride)
        .min(g.out_w);
    (lo.min(hi), hi)
}

pub(crate) fn im2col<T: Float>(x: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut col = vec![T::zero(); g.rows() * cols];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let dst = &mut dst_row[b * out_plane..(b + 1) * out_plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        let (lo, hi) = valid_range(g, kx);
                        for ox in lo..hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image batch.
pub(crate) fn col2im<T: Float>(col: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let mut x = vec![T::zero(); g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let dst =
                        &mut x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let src = &src_row[b * out_plane..(b + 1) * out_plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        let (lo, hi) = valid_range(g, kx);
                        for ox in lo..hi {
                            dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[b, c, p] -> [c, b, p]` and back (`c` and `b` swap roles).
pub(crate) fn swap_batch_channel<T: Float>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &x[(b * channels + c) * plane..(b * channels + c + 1) * plane];
            out[(c * batch + b) * plane..(c * batch + b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

pub(crate) struct ConvOutput<T> {
    pub out: Vec<T>,
    pub col: Vec<T>,
}

/// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `bias: [Cout]` -> `[B, Cout, out_h, out_w]`.
pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &Geometry,
    c_out: usize,
) -> ConvOutput<T> {
    let col = im2col(x, g);
    let (rows, cols) = (g.rows(), g.cols());
    let mut out_mat = vec![T::zero(); c_out * cols];
    T::gemm(
        c_out,
        rows,
        cols,
        T::one(),
        w,
        rows,
        1,
        &col,
        cols,
        1,
        T::zero(),
        &mut out_mat,
        cols,
        1,
    );
    let plane = g.out_h * g.out_w;
    let mut out = swap_batch_channel(&out_mat, c_out, g.batch, plane);
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, g.batch, c_out, plane);
    }
    ConvOutput { out, col }
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Float>(
    grad: &[T],
    w: &[T],
    col: &[T],
    g: &Geometry,
    c_out: usize,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let plane = g.out_h * g.out_w;
    let gmat = swap_batch_channel(grad, g.batch, c_out, plane);
    let gw = needs[1].then(|| {
        let mut gw = vec![T::zero(); c_out * rows];
        T::gemm(
            c_out,
            cols,
            rows,
            T::one(),
            &gmat,
            cols,
            1,
            col,
            1,
            cols,
            T::zero(),
            &mut gw,
            rows,
            1,
        );
        gw
    });
    let gx = needs[0].then(|| {
        let mut gcol = vec![T::zero(); rows * cols];
        T::gemm(
            rows,
            c_out,
            cols,
            T::one(),
            w,
            1,
            rows,
            &gmat,
            cols,
            1,
            T::zero(),
            &mut gcol,
            cols,
            1,
        );
        col2im(&gcol, g)
    });
    let gb = needs[2].then(|| channel_sums(&gmat, c_out, cols));
    ConvGrads {
        x: gx,
        w: gw,
        bias: gb,
    }
}

/// Geometry of the sliding windows a transposed convolution scatters into its output.
pub(crate) fn transpose_geometry(
    batch: usize,
    c_out: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: (usize, usize),
    stride: usize,
    pad: usize,
) -> Geometry {
    Geometry {
        batch,
        channels: c_out,
        height: out_h,
        width: out_w,
        kh: k.0,
        kw: k.1,
        stride,
        pad,
        out_h: in_h,
        out_w: in_w,
    }
}

/// `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]` -> `[B, Cout, Ho, Wo]` with `g` from
/// [`transpose_geometry`].
pub(crate) fn conv_transpose2d_forward<T: Float>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &Geometry,
    c_in: usize,
) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let plane = g.out_h * g.out_w;
    let xmat = swap_batch_channel(x, g.batch, c_in, plane);
    let mut col = vec![T::zero(); rows * cols];
    T::gemm(
        rows,
        c_in,
        cols,
        T::one(),
        w,
        1,
        rows,
        &xmat,
        cols,
        1,
        T::zero(),
        &mut col,
        cols,
        1,
    );
    let mut out = col2im(&col, g);
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, g.batch, g.channels, g.height * g.width);
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Float>(
    grad: &[T],
    x: &[T],
    w: &[T],
    g: &Geometry,
    c_in: usize,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let plane = g.out_h * g.out_w;
    let gcol = (needs[0] || needs[1]).then(|| im2col(grad, g));
    let gx = needs[0].then(|| {
        let gcol = gcol.as_ref().expect("computed above");
        let mut gxmat = vec![T::zero(); c_in * cols];
        T::gemm(
            c_in,
            rows,
            cols,
            T::one(),
            w,
            rows,
            1,
            gcol,
            cols,
            1,
            T::zero(),
            &mut gxmat,
            cols,
            1,
        );
        swap_batch_channel(&gxmat, c_in, g.batch, plane)
    });
    let gw = needs[1].then(|| {
        let gcol = gcol.as_ref().expect("computed above");
        let xmat = swap_batch_channel(x, g.batch, c_in, plane);
        let mut gw = vec![T::zero(); c_in * rows];
        T::gemm(
            c_in,
            cols,
            rows,
            T::one(),
            &xmat,
            cols,
            1,
            gcol,
            1,
            cols,
            T::zero(),
            &mut gw,
            rows,
            1,
        );
        gw
    });
    let gb = needs[2].then(|| {
        let gmat = swap_batch_channel(grad, g.batch, g.channels, g.height * g.width);
        channel_sums(&gmat, g.channels, g.batch * g.height * g.width)
    });
    ConvGrads {
        x: gx,
        w: gw,
        bias: gb,
    }
}

fn add_channel_bias<T: Float>(
    out: &mut [T],
    bias: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) {
    for b in 0..batch {
        for (c, &bc) in bias.iter().enumerate().take(channels) {
            for v in &mut out[(b * channels + c) * plane..(b * channels + c + 1) * plane] {
                *v += bc;
            }
        }
    }
}

fn channel_sums<T: Float>(mat: &[T], channels: usize, cols: usize) -> Vec<T> {
    (0..channels)
        .map(|c| mat[c * cols..(c + 1) * cols].iter().copied().sum())
        .collect()
}
