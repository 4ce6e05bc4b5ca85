//! Forward and backward numeric kernels behind the tape operations.
//!
//! Convolution lowers each image to a column matrix and multiplies it with
//! the kernel. Work is split across images with rayon; any reduction over
//! the batch (kernel and bias gradients) is summed in image order so the
//! result does not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a sliding window, `None` when the window does not fit.
pub fn window_output(len: usize, padding: usize, window: usize, stride: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || window == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

pub fn conv_geometry(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let (cin, h, w) = match *input {
        [_, c, h, w] => (c, h, w),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be [N,C,H,W], got {input:?}"),
            })
        }
    };
    let (kc, kh, kw) = match *kernel {
        [_, c, kh, kw] => (c, kh, kw),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel must be [Cout,Cin,kh,kw], got {kernel:?}"),
            })
        }
    };
    if kc != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {cin} channels but kernel expects {kc}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let (out_h, out_w) = match (
        window_output(h, padding, kh, stride),
        window_output(w, padding, kw, stride),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(TensorError::EmptyOutput {
                op: "conv2d",
                detail: format!(
                    "{h}x{w} input with padding {padding} is smaller than the {kh}x{kw} kernel"
                ),
            })
        }
    };
    Ok(ConvGeometry {
        channels: cin,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
        out_h,
        out_w,
    })
}

/// Range of output columns `ox` whose source column `ox*stride + k - pad`
/// falls inside `0..len`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ox*stride + k >= pad  and  ox*stride + k < len + pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(image: &[T], g: &ConvGeometry, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, ky, g.stride, g.padding);
            for kx in 0..g.kernel_w {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, kx, g.stride, g.padding);
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                dst[..y_lo * g.out_w].fill(T::zero());
                dst[y_hi * g.out_w..].fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    if x_hi > x_lo {
                        let ix0 = x_lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            out_row[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                        } else {
                            for (j, v) in out_row[x_lo..x_hi].iter_mut().enumerate() {
                                *v = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, image: &mut [T]) {
    let cols = g.col_cols();
    image.fill(T::zero());
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            let (y_lo, y_hi) = valid_range(g.out_h, g.height, ky, g.stride, g.padding);
            for kx in 0..g.kernel_w {
                let (x_lo, x_hi) = valid_range(g.out_w, g.width, kx, g.stride, g.padding);
                if x_hi <= x_lo {
                    continue;
                }
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let from = &src[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                    let ix0 = x_lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        for (d, v) in dst[ix0..ix0 + from.len()].iter_mut().zip(from) {
                            *d = *d + *v;
                        }
                    } else {
                        for (j, v) in from.iter().enumerate() {
                            let d = &mut dst[ix0 + j * g.stride];
                            *d = *d + *v;
                        }
                    }
                }
            }
        }
    }
}

/// Copies `image` into a zero-bordered buffer of `C × (H+2p) × (W+2p)`.
fn pad_image<T: Scalar>(image: &[T], g: &ConvGeometry) -> Vec<T> {
    let (hp, wp) = (g.height + 2 * g.padding, g.width + 2 * g.padding);
    let mut padded = vec![T::zero(); g.channels * hp * wp];
    for c in 0..g.channels {
        for y in 0..g.height {
            let src = &image[(c * g.height + y) * g.width..(c * g.height + y + 1) * g.width];
            let at = (c * hp + y + g.padding) * wp + g.padding;
            padded[at..at + g.width].copy_from_slice(src);
        }
    }
    padded
}

/// Stride-1 convolution as one GEMM per kernel tap over a padded image.
///
/// Output pixel `(y, x)` lives at flat offset `q = y·Wp + x` of the padded
/// grid and tap `(ky, kx)` reads offset `q + ky·Wp + kx`, so every tap is a
/// contiguous window of the padded buffer. Offsets with `x >= out_w` are
/// wrap-around garbage and are dropped.
struct Shifted {
    wp: usize,
    plane: usize,
    span: usize,
    taps: usize,
}

impl Shifted {
    fn new(g: &ConvGeometry) -> Self {
        let wp = g.width + 2 * g.padding;
        Self {
            wp,
            plane: (g.height + 2 * g.padding) * wp,
            span: (g.out_h - 1) * wp + g.out_w,
            taps: g.kernel_h * g.kernel_w,
        }
    }

    fn offsets<'g>(&self, g: &'g ConvGeometry) -> impl Iterator<Item = (usize, usize)> + 'g {
        let wp = self.wp;
        (0..g.kernel_h).flat_map(move |ky| (0..g.kernel_w).map(move |kx| (ky * g.kernel_w + kx, ky * wp + kx)))
    }
}

fn conv_image_forward<T: Scalar>(image: &[T], kernel: &[T], cout: usize, g: &ConvGeometry, dst: &mut [T]) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    if g.is_pointwise() {
        T::gemm(cout, rows, cols, T::one(), kernel, (rows, 1), image, (cols, 1), T::zero(), dst, (cols, 1));
    } else if g.stride == 1 {
        let sh = Shifted::new(g);
        let padded = pad_image(image, g);
        let mut acc = vec![T::zero(); cout * sh.span];
        for (tap, offset) in sh.offsets(g) {
            T::gemm(
                cout,
                g.channels,
                sh.span,
                T::one(),
                &kernel[tap..],
                (rows, sh.taps),
                &padded[offset..],
                (sh.plane, 1),
                T::one(),
                &mut acc,
                (sh.span, 1),
            );
        }
        for co in 0..cout {
            for y in 0..g.out_h {
                let from = &acc[co * sh.span + y * sh.wp..co * sh.span + y * sh.wp + g.out_w];
                dst[(co * g.out_h + y) * g.out_w..(co * g.out_h + y + 1) * g.out_w].copy_from_slice(from);
            }
        }
    } else {
        let mut col = vec![T::zero(); rows * cols];
        im2col(image, g, &mut col);
        T::gemm(cout, rows, cols, T::one(), kernel, (rows, 1), &col, (cols, 1), T::zero(), dst, (cols, 1));
    }
}

/// Returns this image's kernel-gradient contribution when requested and
/// writes the input gradient into `gx` when given.
fn conv_image_backward<T: Scalar>(
    image: &[T],
    kernel: &[T],
    cout: usize,
    gy: &[T],
    g: &ConvGeometry,
    gx: Option<&mut [T]>,
    want_kernel: bool,
) -> Option<Vec<T>> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    if g.is_pointwise() {
        let gw = want_kernel.then(|| {
            let mut gw = vec![T::zero(); cout * rows];
            T::gemm(cout, cols, rows, T::one(), gy, (cols, 1), image, (1, cols), T::zero(), &mut gw, (rows, 1));
            gw
        });
        if let Some(gx) = gx {
            T::gemm(rows, cout, cols, T::one(), kernel, (1, rows), gy, (cols, 1), T::zero(), gx, (cols, 1));
        }
        gw
    } else if g.stride == 1 {
        let sh = Shifted::new(g);
        let mut gy_wide = vec![T::zero(); cout * sh.span];
        for co in 0..cout {
            for y in 0..g.out_h {
                let from = &gy[(co * g.out_h + y) * g.out_w..(co * g.out_h + y + 1) * g.out_w];
                gy_wide[co * sh.span + y * sh.wp..co * sh.span + y * sh.wp + g.out_w].copy_from_slice(from);
            }
        }
        let gw = want_kernel.then(|| {
            let padded = pad_image(image, g);
            let mut gw = vec![T::zero(); cout * rows];
            for (tap, offset) in sh.offsets(g) {
                T::gemm(
                    cout,
                    sh.span,
                    g.channels,
                    T::one(),
                    &gy_wide,
                    (sh.span, 1),
                    &padded[offset..],
                    (1, sh.plane),
                    T::zero(),
                    &mut gw[tap..],
                    (rows, sh.taps),
                );
            }
            gw
        });
        if let Some(gx) = gx {
            transposed_conv_stride1(gy, kernel, cout, g, gx);
        }
        gw
    } else {
        let mut col = vec![T::zero(); rows * cols];
        im2col(image, g, &mut col);
        let gw = want_kernel.then(|| {
            let mut gw = vec![T::zero(); cout * rows];
            T::gemm(cout, cols, rows, T::one(), gy, (cols, 1), &col, (1, cols), T::zero(), &mut gw, (rows, 1));
            gw
        });
        if let Some(gx) = gx {
            T::gemm(rows, cout, cols, T::one(), kernel, (1, rows), gy, (cols, 1), T::zero(), &mut col, (cols, 1));
            col2im(&col, g, gx);
        }
        gw
    }
}

/// Input gradient of a stride-1 convolution: the output gradient
/// correlated with the spatially flipped, channel-transposed kernel.
fn transposed_conv_stride1<T: Scalar>(gy: &[T], kernel: &[T], cout: usize, g: &ConvGeometry, gx: &mut [T]) {
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    let taps = kh * kw;
    if kh != kw || g.padding >= kh {
        // Padding wider than the kernel: scatter through the column matrix.
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut col = vec![T::zero(); rows * cols];
        T::gemm(rows, cout, cols, T::one(), kernel, (1, rows), gy, (cols, 1), T::zero(), &mut col, (cols, 1));
        col2im(&col, g, gx);
        return;
    }
    let mut flipped = vec![T::zero(); kernel.len()];
    for co in 0..cout {
        for ci in 0..g.channels {
            for t in 0..taps {
                flipped[(ci * cout + co) * taps + (taps - 1 - t)] = kernel[(co * g.channels + ci) * taps + t];
            }
        }
    }
    let back = ConvGeometry {
        channels: cout,
        height: g.out_h,
        width: g.out_w,
        kernel_h: kh,
        kernel_w: kw,
        stride: 1,
        padding: kh - 1 - g.padding,
        out_h: g.height,
        out_w: g.width,
    };
    debug_assert_eq!(g.height, g.out_h + 2 * back.padding + 1 - kh);
    let (rows, cols) = (back.col_rows(), back.col_cols());
    let mut col = vec![T::zero(); rows * cols];
    im2col(gy, &back, &mut col);
    T::gemm(g.channels, rows, cols, T::one(), &flipped, (rows, 1), &col, (cols, 1), T::zero(), gx, (cols, 1));
}

/// Cross-correlation of `input` with `kernel`, plus an optional per-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), kernel.shape(), stride, padding)?;
    let n = input.shape()[0];
    let cout = kernel.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias shape {:?} does not match {cout} output channels", b.shape()),
            });
        }
    }
    let in_plane = g.channels * g.height * g.width;
    let out_plane = cout * g.col_cols();
    let mut out = vec![T::zero(); n * out_plane];
    if n > 0 && out_plane > 0 {
        out.par_chunks_mut(out_plane)
            .zip(input.data().par_chunks(in_plane.max(1)))
            .for_each(|(dst, image)| {
                conv_image_forward(image, kernel.data(), cout, &g, dst);
                if let Some(b) = bias {
                    for (co, chunk) in dst.chunks_mut(g.col_cols()).enumerate() {
                        let bv = b.data()[co];
                        chunk.iter_mut().for_each(|v| *v = *v + bv);
                    }
                }
            });
    }
    Ok(Tensor::from_parts(vec![n, cout, g.out_h, g.out_w], out))
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input.shape(), kernel.shape(), stride, padding)?;
    let n = input.shape()[0];
    let cout = kernel.shape()[0];
    let (want_input, want_kernel, want_bias) = want;
    let in_plane = g.channels * g.height * g.width;
    let out_plane = cout * g.col_cols();
    let cols = g.col_cols();
    let image = |i: usize| &input.data()[i * in_plane..(i + 1) * in_plane];
    let gy = |i: usize| &grad_out.data()[i * out_plane..(i + 1) * out_plane];

    let mut grad_input = want_input.then(|| vec![T::zero(); n * in_plane]);
    let partials: Vec<Option<Vec<T>>> = match grad_input.as_mut() {
        Some(gx) if in_plane > 0 => gx
            .par_chunks_mut(in_plane)
            .enumerate()
            .map(|(i, gx_img)| conv_image_backward(image(i), kernel.data(), cout, gy(i), &g, Some(gx_img), want_kernel))
            .collect(),
        _ => (0..n)
            .into_par_iter()
            .map(|i| conv_image_backward(image(i), kernel.data(), cout, gy(i), &g, None, want_kernel))
            .collect(),
    };

    let grad_kernel = want_kernel.then(|| {
        let mut total = vec![T::zero(); kernel.len()];
        for p in partials.iter().flatten() {
            for (t, v) in total.iter_mut().zip(p) {
                *t = *t + *v;
            }
        }
        Tensor::from_parts(kernel.shape().to_vec(), total)
    });
    let grad_bias = want_bias.then(|| {
        let mut total = vec![T::zero(); cout];
        for i in 0..n {
            for (co, chunk) in gy(i).chunks(cols.max(1)).enumerate() {
                total[co] = total[co] + chunk.iter().copied().sum();
            }
        }
        Tensor::from_parts(vec![cout], total)
    });
    Ok(ConvGrads {
        input: grad_input.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        kernel: grad_kernel,
        bias: grad_bias,
    })
}

pub fn avg_pool_forward<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avg_pool2d")?;
    let (oh, ow) = match (window_output(h, 0, window, stride), window_output(w, 0, window, stride)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::EmptyOutput {
                op: "avg_pool2d",
                detail: format!("window {window} (stride {stride}) does not fit a {h}x{w} input"),
            })
        }
    };
    let scale = T::one() / T::of((window * window) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..window {
                    let row = (oy * stride + ky) * w + ox * stride;
                    acc = acc + plane[row..row + window].iter().copied().sum();
                }
                out.push(acc * scale);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let scale = T::one() / T::of((window * window) as f64);
    let mut gx = vec![T::zero(); input_shape.iter().product()];
    for (plane, gy) in gx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[oy * ow + ox] * scale;
                for ky in 0..window {
                    let row = (oy * stride + ky) * w + ox * stride;
                    plane[row..row + window].iter_mut().for_each(|v| *v = *v + g);
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            detail: format!("batch/spatial dims differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for img in 0..na {
        data.extend_from_slice(&a.data()[img * ca * plane..(img + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[img * cb * plane..(img + 1) * cb * plane]);
    }
    Ok(Tensor::from_parts(vec![na, ca + cb, ha, wa], data))
}

/// Values cached by the batch-norm forward pass for its backward rule.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Sum with eight independent accumulators (vectorizes, fixed order).
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut lanes = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for chunk in &mut chunks {
        for (l, &v) in lanes.iter_mut().zip(chunk) {
            *l = *l + f(v);
        }
    }
    let tail: T = chunks.remainder().iter().map(|&v| f(v)).sum();
    lanes.iter().copied().sum::<T>() + tail
}

fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (mut ca, mut cb) = (a.chunks_exact(8), b.chunks_exact(8));
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] = lanes[i] + x[i] * y[i];
        }
    }
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    lanes.iter().copied().sum::<T>() + tail
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    pub cache: BatchNormCache<T>,
    /// Batch mean and unbiased batch variance (train mode only).
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

pub fn batch_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: (&[T], &[T]),
    train: bool,
    epsilon: T,
) -> Result<BatchNormOutput<T>> {
    let (n, c, h, w) = input.dims4("batch_norm")?;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("{name} shape {:?} does not match {c} channels", t.shape()),
            });
        }
    }
    if running.0.len() != c || running.1.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            detail: format!("running stats must have {c} entries"),
        });
    }
    let plane = h * w;
    let count = n * plane;
    let planes_of = |ch: usize| (0..n).map(move |img| &input.data()[(img * c + ch) * plane..(img * c + ch + 1) * plane]);
    let (mean, var, batch_stats) = if train {
        if count < 2 {
            return Err(TensorError::TooFewSamples(count));
        }
        let m = T::of(count as f64);
        let mut mean = Vec::with_capacity(c);
        let mut var = Vec::with_capacity(c);
        let mut unbiased = Vec::with_capacity(c);
        for ch in 0..c {
            let mu = planes_of(ch).map(|p| lane_sum(p, |v| v)).sum::<T>() / m;
            let sq: T = planes_of(ch).map(|p| lane_sum(p, |v| (v - mu) * (v - mu))).sum();
            mean.push(mu);
            var.push(sq / m);
            unbiased.push(sq / T::of((count - 1) as f64));
        }
        (mean.clone(), var, Some((mean, unbiased)))
    } else {
        (running.0.to_vec(), running.1.to_vec(), None)
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + epsilon).sqrt()).collect();
    let mut normalized = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for (i, ((src, xh), y)) in input
        .data()
        .chunks(plane.max(1))
        .zip(normalized.chunks_mut(plane.max(1)))
        .zip(out.chunks_mut(plane.max(1)))
        .enumerate()
    {
        let ch = i % c;
        let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
        for ((&v, xh), y) in src.iter().zip(xh.iter_mut()).zip(y.iter_mut()) {
            *xh = (v - mu) * is;
            *y = ga * *xh + be;
        }
    }
    Ok(BatchNormOutput {
        output: Tensor::from_parts(input.shape().to_vec(), out),
        cache: BatchNormCache {
            normalized,
            inv_std,
            train,
        },
        batch_stats,
    })
}

/// Returns gradients for (input, gamma, beta).
pub fn batch_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let step = plane.max(1);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (i, (gy, xh)) in grad_out.data().chunks(step).zip(cache.normalized.chunks(step)).enumerate() {
        let ch = i % c;
        sum_g[ch] = sum_g[ch] + lane_sum(gy, |v| v);
        sum_gx[ch] = sum_gx[ch] + lane_dot(gy, xh);
    }
    let m = T::of((n * plane) as f64);
    let mut gx = vec![T::zero(); grad_out.len()];
    for (i, ((gy, xh), dst)) in grad_out
        .data()
        .chunks(step)
        .zip(cache.normalized.chunks(step))
        .zip(gx.chunks_mut(step))
        .enumerate()
    {
        let ch = i % c;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        if cache.train {
            let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
            for ((d, &g), &x) in dst.iter_mut().zip(gy).zip(xh) {
                *d = scale * (g - mg - x * mgx);
            }
        } else {
            for (d, &g) in dst.iter_mut().zip(gy) {
                *d = scale * g;
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), gx),
        Tensor::from_parts(vec![c], sum_gx),
        Tensor::from_parts(vec![c], sum_g),
    )
}

pub fn linear_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = input.dims2("linear")?;
    let (k, wf) = weight.dims2("linear")?;
    if f != wf {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            detail: format!("input has {f} features but weight expects {wf}"),
        });
    }
    if bias.shape() != [k] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            detail: format!("bias shape {:?} does not match {k} outputs", bias.shape()),
        });
    }
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(n, f, k, T::one(), input.data(), (f, 1), weight.data(), (1, f), T::one(), &mut out, (k, 1));
    Ok(Tensor::from_parts(vec![n, k], out))
}

/// Row-wise softmax with max subtraction, and the mean negative log-likelihood.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(k.max(1)).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss = loss - (row[label] - max - log_sum);
        probs.extend(row.iter().map(|&z| (z - max - log_sum).exp()));
    }
    let loss = if n == 0 { T::zero() } else { loss / T::of(n as f64) };
    Ok((loss, Tensor::from_parts(vec![n, k], probs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    /// Direct nested-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4("t").unwrap();
        let (cout, _, kh, kw) = k.dims4("t").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, cout, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(stride, pad, kh) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1), (3, 2, 3)] {
            let x = Tensor::<f64>::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64) - 5.0).unwrap();
            let k = Tensor::<f64>::from_fn(&[4, 3, kh, kh], |i| ((i * 13 % 7) as f64) / 3.0 - 1.0).unwrap();
            let fast = conv2d_forward(&x, &k, None, stride, pad).unwrap();
            let slow = naive_conv(&x, &k, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_identity_kernel_sums_diagonal() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_empty_output() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap();
        let k = Tensor::<f64>::zeros(&[1, 3, 3, 3]).unwrap();
        let err = conv2d_forward(&x, &k, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("2 channels") && err.to_string().contains("expects 3"));
        let big = Tensor::<f64>::zeros(&[1, 2, 5, 5]).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &big, None, 1, 0),
            Err(TensorError::EmptyOutput { .. })
        ));
    }

    #[test]
    fn avg_pool_window_mean() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool_forward(&x, 2, 2).unwrap().data(), &[2.5]);
        assert!(avg_pool_forward(&x, 3, 1).is_err());
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let logits = t(&[1, 3], &[1000.0, 0.0, 0.0]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss < 1e-12);
        assert!((probs.data()[0] - 1.0).abs() < 1e-12);
    }
}
