//! Forward and backward kernels for the operator set used by the models.
//!
//! Kernels are plain functions over tensors; [`Tape`](crate::autograd::Tape)
//! records them for differentiation and the evaluation path calls them
//! directly.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Side length of the convolution kernel.
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Upper bound on the number of elements in one patch matrix.
const PATCH_BUDGET: usize = 1 << 22;

/// Training or inference behaviour for mode-dependent layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = input.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
    if wcin != cin || kh != KERNEL || kw != KERNEL {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} for {cout} output channels", bias.shape()),
        ));
    }
    Ok((n, cin, h, w, cout))
}

/// Samples per patch-matrix chunk for a layer of the given geometry.
fn conv_chunk(n: usize, cin: usize, hw: usize) -> usize {
    (PATCH_BUDGET / (cin * TAPS * hw)).clamp(1, n)
}

/// Patch matrix `[cin*9, chunk*h*w]` for samples `first..first+chunk`.
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    first: usize,
    chunk: usize,
    cols: &mut [T],
) {
    let hw = h * w;
    let width = chunk * hw;
    for ci in 0..cin {
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = (ci * TAPS + dy * KERNEL + dx) * width;
                for j in 0..chunk {
                    let plane = &x[((first + j) * cin + ci) * hw..][..hw];
                    let out = &mut cols[row + j * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + dy as isize - 1;
                        let dst = &mut out[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                        // Column shift by dx-1 with zero fill at the border.
                        match dx {
                            0 => {
                                dst[0] = T::zero();
                                dst[1..].copy_from_slice(&src[..w - 1]);
                            }
                            1 => dst.copy_from_slice(src),
                            _ => {
                                dst[..w - 1].copy_from_slice(&src[1..]);
                                dst[w - 1] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the input gradient.
fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    first: usize,
    chunk: usize,
    dx_out: &mut [T],
) {
    let hw = h * w;
    let width = chunk * hw;
    for ci in 0..cin {
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = (ci * TAPS + dy * KERNEL + dx) * width;
                for j in 0..chunk {
                    let plane = &mut dx_out[((first + j) * cin + ci) * hw..][..hw];
                    let src_rows = &cols[row + j * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let g = &src_rows[y * w..(y + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        match dx {
                            0 => {
                                for (d, &v) in dst[..w - 1].iter_mut().zip(&g[1..]) {
                                    *d += v;
                                }
                            }
                            1 => {
                                for (d, &v) in dst.iter_mut().zip(g) {
                                    *d += v;
                                }
                            }
                            _ => {
                                for (d, &v) in dst[1..].iter_mut().zip(&g[..w - 1]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Spatial extents are preserved.
///
/// `input` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin, 3, 3]`, `bias` is
/// `[Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout) = check_conv_shapes(input, weight, bias)?;
    let hw = h * w;
    let k = cin * TAPS;
    let chunk = conv_chunk(n, cin, hw);
    let mut out = vec![T::zero(); n * cout * hw];
    let mut cols = vec![T::zero(); k * chunk * hw];
    let mut prod = vec![T::zero(); cout * chunk * hw];
    let x = input.data();
    let mut first = 0;
    while first < n {
        let c = chunk.min(n - first);
        let width = c * hw;
        let cols = &mut cols[..k * width];
        let prod = &mut prod[..cout * width];
        im2col(x, cin, h, w, first, c, cols);
        gemm(cout, k, width, weight.data(), Layout::Normal, cols, Layout::Normal, T::zero(), prod);
        for j in 0..c {
            for co in 0..cout {
                let b = bias.data()[co];
                let src = &prod[co * width + j * hw..][..hw];
                let dst = &mut out[((first + j) * cout + co) * hw..][..hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        first += c;
    }
    let out = Tensor::new(&[n, cout, h, w], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// `(input, weight, bias)` gradients; entries not requested are `None`.
pub type LayerGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
///
/// The input gradient is only formed when `need_input` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<LayerGrads<T>> {
    let (n, cin, h, w, cout) = check_conv_shapes(input, weight, bias)?;
    if grad_out.shape() != [n, cout, h, w] {
        return Err(Error::shape("conv2d backward", format!("{:?}", grad_out.shape())));
    }
    let hw = h * w;
    let k = cin * TAPS;
    let chunk = conv_chunk(n, cin, hw);
    let mut gw = vec![T::zero(); cout * k];
    let mut gb = vec![T::zero(); cout];
    let mut gx = if need_input { vec![T::zero(); n * cin * hw] } else { Vec::new() };
    let mut cols = vec![T::zero(); k * chunk * hw];
    let mut gout = vec![T::zero(); cout * chunk * hw];
    let g = grad_out.data();
    let mut first = 0;
    while first < n {
        let c = chunk.min(n - first);
        let width = c * hw;
        let cols = &mut cols[..k * width];
        let gout = &mut gout[..cout * width];
        for j in 0..c {
            for co in 0..cout {
                let src = &g[((first + j) * cout + co) * hw..][..hw];
                gout[co * width + j * hw..][..hw].copy_from_slice(src);
            }
        }
        if need_params {
            for co in 0..cout {
                gb[co] += gout[co * width..(co + 1) * width].iter().copied().sum::<T>();
            }
            im2col(input.data(), cin, h, w, first, c, cols);
            gemm(cout, width, k, gout, Layout::Normal, cols, Layout::Transposed, T::one(), &mut gw);
        }
        if need_input {
            gemm(k, cout, width, weight.data(), Layout::Transposed, gout, Layout::Normal, T::zero(), cols);
            col2im(cols, cin, h, w, first, c, &mut gx);
        }
        first += c;
    }
    let gx = if need_input { Some(Tensor::new(input.shape(), gx)?) } else { None };
    let (gw, gb) = if need_params {
        (
            Some(Tensor::new(weight.shape(), gw)?),
            Some(Tensor::new(bias.shape(), gb)?),
        )
    } else {
        (None, None)
    };
    Ok((gx, gw, gb))
}

/// 2x2 max pooling with stride 2. Odd trailing rows and columns are dropped.
///
/// Returns the pooled tensor and, for every output element, the flat input
/// index of the selected maximum (first in row-major window order on ties).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if h < 2 || w < 2 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial extent {h}x{w} is smaller than the 2x2 window"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [best + 1, best + w, best + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

/// Routes each output gradient to its recorded argmax input position.
pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("maxpool2d backward", format!("{:?}", grad_out.shape())));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(gx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape as input")
}

fn check_dense_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (n, din) = input.dims2("dense")?;
    let (wdin, dout) = weight.dims2("dense")?;
    if wdin != din || bias.shape() != [dout] {
        return Err(Error::shape(
            "dense",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    Ok((n, din, dout))
}

/// Fully connected layer `input * weight + bias` with `weight` stored
/// `[Din, Dout]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din, dout) = check_dense_shapes(input, weight, bias)?;
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, din, dout, input.data(), Layout::Normal, weight.data(), Layout::Normal, T::one(), &mut out);
    let out = Tensor::new(&[n, dout], out)?;
    out.ensure_finite("dense")?;
    Ok(out)
}

/// Gradients of [`dense`] with respect to input, weight and bias.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<LayerGrads<T>> {
    let (n, din, dout) = check_dense_shapes(input, weight, bias)?;
    if grad_out.shape() != [n, dout] {
        return Err(Error::shape("dense backward", format!("{:?}", grad_out.shape())));
    }
    let gx = if need_input {
        let mut gx = vec![T::zero(); n * din];
        gemm(n, dout, din, grad_out.data(), Layout::Normal, weight.data(), Layout::Transposed, T::zero(), &mut gx);
        Some(Tensor::new(input.shape(), gx)?)
    } else {
        None
    };
    let (gw, gb) = if need_params {
        let mut gw = vec![T::zero(); din * dout];
        gemm(din, n, dout, input.data(), Layout::Transposed, grad_out.data(), Layout::Normal, T::zero(), &mut gw);
        let mut gb = vec![T::zero(); dout];
        for row in grad_out.data().chunks_exact(dout) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        (Some(Tensor::new(weight.shape(), gw)?), Some(Tensor::new(bias.shape(), gb)?))
    } else {
        (None, None)
    };
    Ok((gx, gw, gb))
}

/// Inverted-dropout mask: each entry is `1/(1-rate)` with probability
/// `1-rate` and zero otherwise.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut Rng) -> Result<Vec<T>> {
    check_rate(rate)?;
    let keep = 1.0 - rate;
    let scale = T::from_f64_lossy(1.0 / keep);
    Ok((0..len)
        .map(|_| if rng.bernoulli(keep) { scale } else { T::zero() })
        .collect())
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")))
    }
}

/// Dropout: identity in evaluation mode or at rate zero, inverted dropout
/// drawn from `rng` otherwise.
pub fn dropout<T: Scalar>(input: &Tensor<T>, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<T>(input.len(), rate, rng)?;
    Ok(apply_mask(input, &mask))
}

pub(crate) fn apply_mask<T: Scalar>(input: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let data = input.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
    Tensor::new(input.shape(), data).expect("mask matches input")
}

/// Row-wise softmax of `[N, K]` logits with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2("softmax")?;
    logits.ensure_finite("softmax logits")?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &z in row {
            let e = (z - max).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= total;
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Mean softmax cross-entropy of `[N, K]` logits against integer targets,
/// computed through the log-sum-exp form. Returns the loss and the
/// probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if targets.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows but {} targets", targets.len()),
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!("target {t} outside [0, {k})")));
    }
    let probs = softmax(logits)?;
    let mut total = T::zero();
    for (row, &t) in logits.data().chunks_exact(k).zip(targets) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        total += lse - (row[t] - max);
    }
    let loss = total / T::from_usize(n).expect("batch size fits scalar");
    if !loss.is_finite() {
        return Err(Error::non_finite("softmax_cross_entropy"));
    }
    Ok((loss, probs))
}

/// `(probs - onehot) / N`, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, targets: &[usize], upstream: T) -> Tensor<T> {
    let k = probs.shape()[1];
    let scale = upstream / T::from_usize(targets.len()).expect("batch size fits scalar");
    let mut g = probs.data().to_vec();
    for (row, &t) in g.chunks_exact_mut(k).zip(targets) {
        row[t] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    Tensor::new(probs.shape(), g).expect("same shape as probs")
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
