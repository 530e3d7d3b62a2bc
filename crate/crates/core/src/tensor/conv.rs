//! 2-D convolution (cross-correlation, no kernel flip) and its transpose.
//!
//! The public ops take `[B,C,H,W]`. Internally the work is done channels-last
//! (`[B,H,W,C]`), where every kernel row of an output pixel is one contiguous
//! run of the input; the GEMM then yields channels-last output directly.
//! The networks stay channels-last between layers and use the `_nhwc` ops.

use super::{gemm, Result, Scalar, Tensor, TensorError, Var};

/// Output extent of a strided convolution (floor semantics).
pub fn conv2d_output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: "stride and kernel size must be positive".into(),
        });
    }
    if input + 2 * pad < k {
        return Err(TensorError::InvalidShape {
            op: "conv2d",
            reason: format!("padded extent {} smaller than kernel {k}", input + 2 * pad),
        });
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

/// Output extent of a transposed convolution: `(H−1)·stride − 2·pad + k`.
pub fn conv2d_transpose_output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d_transpose",
            reason: "stride and kernel size must be positive".into(),
        });
    }
    let full = (input - 1) * stride + k;
    if full <= 2 * pad {
        return Err(TensorError::InvalidShape {
            op: "conv2d_transpose",
            reason: format!("padding {pad} consumes the whole output"),
        });
    }
    Ok(full - 2 * pad)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    /// Length of one im2row row: `k·k·C`.
    fn row_len(&self) -> usize {
        self.k * self.k * self.channels
    }
    /// Output pixels over the batch.
    fn out_pixels(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Output positions `o` with `0 <= o·stride + offset − pad < extent`.
fn valid_range(out: usize, extent: usize, stride: usize, offset: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    let hi = if extent + pad <= offset {
        0
    } else {
        ((extent + pad - offset - 1) / stride + 1).min(out)
    };
    lo..hi.max(lo)
}

/// Calls `f(row_offset, image_offset, len)` for every contiguous run shared
/// by the im2row buffer and a channels-last image batch.
fn for_each_run(g: &Geometry, mut f: impl FnMut(usize, usize, usize)) {
    let (c, k) = (g.channels, g.k);
    let row_len = g.row_len();
    let image = g.height * g.width * c;
    let mut r = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                let kj_lo = (-x0).max(0) as usize;
                let kj_hi = (g.width as isize - x0).clamp(0, k as isize) as usize;
                if kj_lo < kj_hi {
                    let n = (kj_hi - kj_lo) * c;
                    let ix = (x0 + kj_lo as isize) as usize;
                    for ki in 0..k {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy >= 0 && (iy as usize) < g.height {
                            let src = b * image + (iy as usize * g.width + ix) * c;
                            f(r * row_len + (ki * k + kj_lo) * c, src, n);
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// `[B,H,W,C]` → `[B·Ho·Wo, k·k·C]`, one row per output pixel.
fn im2row<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let mut rows = vec![T::zero(); g.out_pixels() * g.row_len()];
    for_each_run(g, |dst, src, n| rows[dst..dst + n].copy_from_slice(&x[src..src + n]));
    rows
}

/// Adjoint of [`im2row`]: scatter-adds rows back into `[B,H,W,C]`.
fn row2im<T: Scalar>(rows: &[T], g: &Geometry) -> Vec<T> {
    let mut x = vec![T::zero(); g.batch * g.height * g.width * g.channels];
    for_each_run(g, |from, to, n| {
        for (d, &v) in x[to..to + n].iter_mut().zip(&rows[from..from + n]) {
            *d = *d + v;
        }
    });
    x
}

/// `[F,C,k,k]` → `[k·k·C, F]`, the im2row column order.
fn kernel_to_rows<T: Scalar>(w: &[T], f: usize, c: usize, kk: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for fi in 0..f {
        for ci in 0..c {
            for p in 0..kk {
                out[(p * c + ci) * f + fi] = w[(fi * c + ci) * kk + p];
            }
        }
    }
    out
}

fn rows_to_kernel<T: Scalar>(wr: &[T], f: usize, c: usize, kk: usize) -> Vec<T> {
    let mut out = vec![T::zero(); wr.len()];
    for fi in 0..f {
        for ci in 0..c {
            for p in 0..kk {
                out[(fi * c + ci) * kk + p] = wr[(p * c + ci) * f + fi];
            }
        }
    }
    out
}

/// `[B, R, S]` → `[B, S, R]`. Writes are sequential; the strided reads
/// stay within one sample, which fits in cache.
fn transpose_inner<T: Scalar>(x: &[T], b: usize, r: usize, s: usize) -> Vec<T> {
    if r == 1 || s == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(r * s).zip(out.chunks_exact_mut(r * s)).take(b) {
        for (j, col) in dst.chunks_exact_mut(r).enumerate() {
            for (i, v) in col.iter_mut().enumerate() {
                *v = src[i * s + j];
            }
        }
    }
    out
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d = *d + alpha * v;
    }
}

/// Stride-1 convolutions with few output maps run directly on `[B,C,H,W]`:
/// a lowered buffer would be `k·k·C` times the output for little arithmetic.
fn use_direct(g: &Geometry, maps: usize) -> bool {
    g.stride == 1 && maps <= 4
}

/// Visits every (input row, output row, output columns, input column,
/// kernel tap) overlap of a stride-1 correlation between two planes.
fn for_each_overlap(g: &Geometry, mut f: impl FnMut(usize, usize, std::ops::Range<usize>, usize, usize)) {
    for ki in 0..g.k {
        let ys = valid_range(g.out_h, g.height, 1, ki, g.pad);
        for kj in 0..g.k {
            let xs = valid_range(g.out_w, g.width, 1, kj, g.pad);
            if xs.is_empty() {
                continue;
            }
            let ix0 = xs.start + kj - g.pad;
            for oy in ys.clone() {
                f(oy + ki - g.pad, oy, xs.clone(), ix0, ki * g.k + kj);
            }
        }
    }
}

fn direct_forward<T: Scalar>(x: &[T], w: &[T], g: &Geometry, maps: usize) -> Vec<T> {
    let (hw, plane, kk) = (g.height * g.width, g.out_h * g.out_w, g.k * g.k);
    let mut y = vec![T::zero(); g.batch * maps * plane];
    for b in 0..g.batch {
        for f in 0..maps {
            let out = &mut y[(b * maps + f) * plane..][..plane];
            for c in 0..g.channels {
                let src = &x[(b * g.channels + c) * hw..][..hw];
                let wk = &w[(f * g.channels + c) * kk..][..kk];
                for_each_overlap(g, |iy, oy, xs, ix0, tap| {
                    let n = xs.len();
                    axpy(wk[tap], &src[iy * g.width + ix0..][..n], &mut out[oy * g.out_w + xs.start..][..n]);
                });
            }
        }
    }
    y
}

fn direct_input_grad<T: Scalar>(grad: &[T], w: &[T], g: &Geometry, maps: usize) -> Vec<T> {
    let (hw, plane, kk) = (g.height * g.width, g.out_h * g.out_w, g.k * g.k);
    let mut dx = vec![T::zero(); g.batch * g.channels * hw];
    for b in 0..g.batch {
        for c in 0..g.channels {
            let dst = &mut dx[(b * g.channels + c) * hw..][..hw];
            for f in 0..maps {
                let src = &grad[(b * maps + f) * plane..][..plane];
                let wk = &w[(f * g.channels + c) * kk..][..kk];
                for_each_overlap(g, |iy, oy, xs, ix0, tap| {
                    let n = xs.len();
                    axpy(wk[tap], &src[oy * g.out_w + xs.start..][..n], &mut dst[iy * g.width + ix0..][..n]);
                });
            }
        }
    }
    dx
}

fn direct_weight_grad<T: Scalar>(grad: &[T], x: &[T], g: &Geometry, maps: usize) -> Vec<T> {
    let (hw, plane, kk) = (g.height * g.width, g.out_h * g.out_w, g.k * g.k);
    let mut dw = vec![T::zero(); maps * g.channels * kk];
    for b in 0..g.batch {
        for f in 0..maps {
            let gp = &grad[(b * maps + f) * plane..][..plane];
            for c in 0..g.channels {
                let src = &x[(b * g.channels + c) * hw..][..hw];
                let dk = &mut dw[(f * g.channels + c) * kk..][..kk];
                for_each_overlap(g, |iy, oy, xs, ix0, tap| {
                    let n = xs.len();
                    dk[tap] = dk[tap] + dot(&gp[oy * g.out_w + xs.start..][..n], &src[iy * g.width + ix0..][..n]);
                });
            }
        }
    }
    dw
}

fn expect_rank4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    shape.try_into().map_err(|_| TensorError::InvalidShape {
        op,
        reason: format!("expected rank 4, got {shape:?}"),
    })
}

/// Checks a square kernel whose axis `channel_axis` must equal `channels`;
/// returns `(other, k)` where `other` is the remaining leading extent.
fn check_kernel(op: &'static str, x: &[usize], w: &[usize], channels: usize, channel_axis: usize) -> Result<(usize, usize)> {
    let ws = expect_rank4(op, w)?;
    if ws[channel_axis] != channels || ws[2] != ws[3] {
        return Err(TensorError::ShapeMismatch {
            op,
            left: x.to_vec(),
            right: w.to_vec(),
        });
    }
    Ok((ws[1 - channel_axis], ws[2]))
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `[B,C,H,W]` → `[B,H,W,C]`.
    pub fn channels_last(self) -> Result<Var<'t, T>> {
        let [b, c, h, w] = expect_rank4("channels_last", &self.shape())?;
        self.relayout(b, c, h * w, vec![b, h, w, c])
    }

    /// `[B,H,W,C]` → `[B,C,H,W]`.
    pub fn channels_first(self) -> Result<Var<'t, T>> {
        let [b, h, w, c] = expect_rank4("channels_first", &self.shape())?;
        self.relayout(b, h * w, c, vec![b, c, h, w])
    }

    pub(crate) fn relayout(self, b: usize, r: usize, s: usize, out_shape: Vec<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let value = Tensor::new(out_shape, transpose_inner(x.data(), b, r, s))?;
        drop(x);
        self.tape.custom(
            "relayout",
            &[self],
            value,
            Box::new(move |g, _| {
                vec![Some(Tensor::new(in_shape.clone(), transpose_inner(g.data(), b, s, r)).expect("shape"))]
            }),
        )
    }

    /// `input [B,C,H,W]` ⋆ `kernel [F,C,k,k]` → `[B,F,H',W']`.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.tape.check_owner(&kernel)?;
        let x_shape = self.shape();
        let [b, c, h, wd] = expect_rank4("conv2d", &x_shape)?;
        let (f, k) = check_kernel("conv2d", &x_shape, &kernel.shape(), c, 1)?;
        let geo = Geometry {
            batch: b,
            channels: c,
            height: h,
            width: wd,
            k,
            stride,
            pad,
            out_h: conv2d_output_extent(h, k, stride, pad)?,
            out_w: conv2d_output_extent(wd, k, stride, pad)?,
        };
        if !use_direct(&geo, f) {
            return self.channels_last()?.conv2d_nhwc(kernel, stride, pad)?.channels_first();
        }
        let x = self.value();
        let w = kernel.value();
        let w_shape = w.shape().to_vec();
        let value = Tensor::new(vec![b, f, geo.out_h, geo.out_w], direct_forward(x.data(), w.data(), &geo, f))?;
        self.tape.custom(
            "conv2d",
            &[self, kernel],
            value,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    Tensor::new(x_shape.clone(), direct_input_grad(g.data(), w.data(), &geo, f)).expect("shape")
                });
                let gw = needs[1].then(|| {
                    Tensor::new(w_shape.clone(), direct_weight_grad(g.data(), x.data(), &geo, f)).expect("shape")
                });
                vec![gx, gw]
            }),
        )
    }

    /// Channels-last [`Var::conv2d`]: `input [B,H,W,C]`, `kernel [F,C,k,k]`
    /// → `[B,H',W',F]`.
    pub fn conv2d_nhwc(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.tape.check_owner(&kernel)?;
        let x = self.value();
        let w = kernel.value();
        let [b, h, wd, c] = expect_rank4("conv2d", x.shape())?;
        let (f, k) = check_kernel("conv2d", x.shape(), w.shape(), c, 1)?;
        let geo = Geometry {
            batch: b,
            channels: c,
            height: h,
            width: wd,
            k,
            stride,
            pad,
            out_h: conv2d_output_extent(h, k, stride, pad)?,
            out_w: conv2d_output_extent(wd, k, stride, pad)?,
        };
        let (m, len, kk) = (geo.out_pixels(), geo.row_len(), k * k);
        let rows = im2row(x.data(), &geo);
        let wr = kernel_to_rows(w.data(), f, c, kk);
        let mut y = vec![T::zero(); m * f];
        gemm(m, len, f, &rows, false, &wr, false, &mut y, false);
        let value = Tensor::new(vec![b, geo.out_h, geo.out_w, f], y)?;
        let x_shape = x.shape().to_vec();
        let w_shape = w.shape().to_vec();
        drop((x, w));
        self.tape.custom(
            "conv2d",
            &[self, kernel],
            value,
            Box::new(move |g, needs| {
                let gx = needs[0].then(|| {
                    let mut drows = vec![T::zero(); m * len];
                    gemm(m, f, len, g.data(), false, &wr, true, &mut drows, false);
                    Tensor::new(x_shape.clone(), row2im(&drows, &geo)).expect("shape")
                });
                let gw = needs[1].then(|| {
                    let mut dwr = vec![T::zero(); len * f];
                    gemm(len, m, f, &rows, true, g.data(), false, &mut dwr, false);
                    Tensor::new(w_shape.clone(), rows_to_kernel(&dwr, f, c, kk)).expect("shape")
                });
                vec![gx, gw]
            }),
        )
    }

    /// Transposed convolution: `input [B,C,H,W]`, `kernel [C,F,k,k]` →
    /// `[B,F,(H−1)·s−2p+k, …]`. Equals the input-gradient of [`Var::conv2d`]
    /// with the same kernel.
    pub fn conv2d_transpose(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.tape.check_owner(&kernel)?;
        let x_shape = self.shape();
        let [_, c, _, _] = expect_rank4("conv2d_transpose", &x_shape)?;
        check_kernel("conv2d_transpose", &x_shape, &kernel.shape(), c, 0)?;
        self.channels_last()?
            .conv2d_transpose_nhwc(kernel, stride, pad)?
            .channels_first()
    }

    /// Channels-last [`Var::conv2d_transpose`]: `input [B,H,W,C]`, `kernel
    /// [C,F,k,k]` → `[B,H',W',F]`.
    pub fn conv2d_transpose_nhwc(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.tape.check_owner(&kernel)?;
        let x = self.value();
        let w = kernel.value();
        let [b, h, wd, c] = expect_rank4("conv2d_transpose", x.shape())?;
        let (f, k) = check_kernel("conv2d_transpose", x.shape(), w.shape(), c, 0)?;
        let oh = conv2d_transpose_output_extent(h, k, stride, pad)?;
        let ow = conv2d_transpose_output_extent(wd, k, stride, pad)?;
        // Geometry of the forward convolution this op is the adjoint of.
        let geo = Geometry {
            batch: b,
            channels: f,
            height: oh,
            width: ow,
            k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        if conv2d_output_extent(oh, k, stride, pad)? != h || conv2d_output_extent(ow, k, stride, pad)? != wd {
            return Err(TensorError::InvalidShape {
                op: "conv2d_transpose",
                reason: "inconsistent extents".into(),
            });
        }
        let (m, len, kk) = (geo.out_pixels(), geo.row_len(), k * k);
        // As a convolution kernel, [C,F,k,k] maps F channels to C maps.
        let wr = kernel_to_rows(w.data(), c, f, kk);
        let mut rows = vec![T::zero(); m * len];
        gemm(m, c, len, x.data(), false, &wr, true, &mut rows, false);
        let value = Tensor::new(vec![b, oh, ow, f], row2im(&rows, &geo))?;
        drop(rows);
        let x_shape = x.shape().to_vec();
        let w_shape = w.shape().to_vec();
        drop(w);
        self.tape.custom(
            "conv2d_transpose",
            &[self, kernel],
            value,
            Box::new(move |g, needs| {
                let grows = im2row(g.data(), &geo);
                let gx = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * c];
                    gemm(m, len, c, &grows, false, &wr, false, &mut d, false);
                    Tensor::new(x_shape.clone(), d).expect("shape")
                });
                let gw = needs[1].then(|| {
                    let mut dwr = vec![T::zero(); len * c];
                    gemm(len, m, c, &grows, true, x.data(), false, &mut dwr, false);
                    Tensor::new(w_shape.clone(), rows_to_kernel(&dwr, c, f, kk)).expect("shape")
                });
                vec![gx, gw]
            }),
        )
    }
}
