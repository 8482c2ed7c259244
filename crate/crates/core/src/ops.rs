//! Forward and backward kernels over plain tensors.
//!
//! Spatial tensors are `[C, H, W]`; there is no batch axis. Convolutions are
//! cross-correlations (no kernel flip) with zero padding.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a strided window sweep.
pub fn conv_out_extent(input: usize, kernel: usize, padding: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + tap - padding` lands
/// inside `[0, input)`.
#[inline]
fn valid_range(input: usize, out: usize, tap: usize, padding: usize, stride: usize) -> (usize, usize) {
    // o * stride >= padding - tap
    let lo = if padding > tap {
        (padding - tap).div_ceil(stride)
    } else {
        0
    };
    // o * stride + tap - padding <= input - 1
    let hi_num = input + padding;
    if hi_num <= tap {
        return (0, 0);
    }
    let hi = ((hi_num - 1 - tap) / stride + 1).min(out);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_shapes<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    padding: usize,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (ci, h, w) = input.dims3()?;
    let [co, kci, kh, kw] = kernel.shape()[..] else {
        return Err(shape_err(
            "conv2d",
            format!("kernel must be [C_out, C_in, k, k], got {:?}", kernel.shape()),
        ));
    };
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err("conv2d", format!("kernel must be odd and square, got {kh}x{kw}")));
    }
    if kci != ci {
        return Err(shape_err(
            "conv2d",
            format!("input has {ci} channels, kernel expects {kci} (input {:?}, kernel {:?})", input.shape(), kernel.shape()),
        ));
    }
    if stride == 0 {
        return Err(arg_err("conv2d", "stride must be at least 1"));
    }
    let ho = conv_out_extent(h, kh, padding, stride)
        .ok_or_else(|| shape_err("conv2d", format!("kernel {kh} larger than padded input {h}+2*{padding}")))?;
    let wo = conv_out_extent(w, kw, padding, stride)
        .ok_or_else(|| shape_err("conv2d", format!("kernel {kw} larger than padded input {w}+2*{padding}")))?;
    Ok((ci, h, w, co, kh, ho, wo))
}

/// Multi-channel 2D cross-correlation. Returns the output and its MAC count.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    padding: usize,
    stride: usize,
) -> Result<(Tensor<S>, u64)> {
    let (ci, h, w, co, k, ho, wo) = conv2d_shapes(input, kernel, padding, stride)?;
    let x = input.data();
    let wt = kernel.data();
    let mut out = vec![S::zero(); co * ho * wo];
    for o in 0..co {
        let out_c = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..ci {
            let x_c = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, ho, ky, padding, stride);
                for kx in 0..k {
                    let wv = wt[((o * ci + c) * k + ky) * k + kx];
                    if wv == S::zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(w, wo, kx, padding, stride);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let row = &x_c[iy * w..(iy + 1) * w];
                        let orow = &mut out_c[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            let off = kx as isize - padding as isize;
                            for ox in ox0..ox1 {
                                orow[ox] = orow[ox] + wv * row[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] = orow[ox] + wv * row[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    let macs = (co * ci * k * k * ho * wo) as u64;
    Ok((Tensor::new([co, ho, wo], out)?, macs))
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub(crate) fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    padding: usize,
    stride: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Tensor<S>>, Option<Tensor<S>>)> {
    let (ci, h, w, co, k, ho, wo) = conv2d_shapes(input, kernel, padding, stride)?;
    let x = input.data();
    let wt = kernel.data();
    let g = grad_out.data();
    let mut dx = want_input.then(|| vec![S::zero(); ci * h * w]);
    let mut dw = want_kernel.then(|| vec![S::zero(); co * ci * k * k]);
    for o in 0..co {
        let g_c = &g[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..ci {
            let x_c = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, ho, ky, padding, stride);
                for kx in 0..k {
                    let widx = ((o * ci + c) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (ox0, ox1) = valid_range(w, wo, kx, padding, stride);
                    let mut acc = S::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - padding;
                        let grow = &g_c[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - padding;
                            let gv = grow[ox];
                            if let Some(dx) = dx.as_mut() {
                                let d = &mut dx[c * h * w + iy * w + ix];
                                *d = *d + wv * gv;
                            }
                            acc = acc + x_c[iy * w + ix] * gv;
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[widx] = dw[widx] + acc;
                    }
                }
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::new([ci, h, w], d)).transpose()?,
        dw.map(|d| Tensor::new([co, ci, k, k], d)).transpose()?,
    ))
}

fn depthwise_shapes<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    let [kc, kh, kw] = kernel.shape()[..] else {
        return Err(shape_err(
            "depthwise_conv2d",
            format!("kernel must be [C, k, k], got {:?}", kernel.shape()),
        ));
    };
    if kc != c {
        return Err(shape_err("depthwise_conv2d", format!("input has {c} channels, kernel has {kc}")));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err("depthwise_conv2d", format!("kernel must be odd and square, got {kh}x{kw}")));
    }
    let ho = conv_out_extent(h, kh, padding, 1)
        .ok_or_else(|| shape_err("depthwise_conv2d", "kernel larger than padded input"))?;
    let wo = conv_out_extent(w, kw, padding, 1)
        .ok_or_else(|| shape_err("depthwise_conv2d", "kernel larger than padded input"))?;
    Ok((c, h, w, kh, ho, wo))
}

/// Per-channel spatial cross-correlation with stride 1.
pub fn depthwise_conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    padding: usize,
) -> Result<(Tensor<S>, u64)> {
    let (c, h, w, k, ho, wo) = depthwise_shapes(input, kernel, padding)?;
    let x = input.data();
    let wt = kernel.data();
    let mut out = vec![S::zero(); c * ho * wo];
    for ch in 0..c {
        let x_c = &x[ch * h * w..(ch + 1) * h * w];
        let out_c = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, ky, padding, 1);
            for kx in 0..k {
                let wv = wt[(ch * k + ky) * k + kx];
                let (ox0, ox1) = valid_range(w, wo, kx, padding, 1);
                for oy in oy0..oy1 {
                    let iy = oy + ky - padding;
                    for ox in ox0..ox1 {
                        let ix = ox + kx - padding;
                        out_c[oy * wo + ox] = out_c[oy * wo + ox] + wv * x_c[iy * w + ix];
                    }
                }
            }
        }
    }
    Ok((Tensor::new([c, ho, wo], out)?, (c * k * k * ho * wo) as u64))
}

pub(crate) fn depthwise_conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    padding: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (c, h, w, k, ho, wo) = depthwise_shapes(input, kernel, padding)?;
    let x = input.data();
    let wt = kernel.data();
    let g = grad_out.data();
    let mut dx = vec![S::zero(); c * h * w];
    let mut dw = vec![S::zero(); c * k * k];
    for ch in 0..c {
        for ky in 0..k {
            let (oy0, oy1) = valid_range(h, ho, ky, padding, 1);
            for kx in 0..k {
                let widx = (ch * k + ky) * k + kx;
                let wv = wt[widx];
                let (ox0, ox1) = valid_range(w, wo, kx, padding, 1);
                let mut acc = S::zero();
                for oy in oy0..oy1 {
                    let iy = oy + ky - padding;
                    for ox in ox0..ox1 {
                        let ix = ox + kx - padding;
                        let gv = g[ch * ho * wo + oy * wo + ox];
                        let xi = ch * h * w + iy * w + ix;
                        dx[xi] = dx[xi] + wv * gv;
                        acc = acc + x[xi] * gv;
                    }
                }
                dw[widx] = acc;
            }
        }
    }
    Ok((Tensor::new([c, h, w], dx)?, Tensor::new([c, k, k], dw)?))
}

/// Max pooling; also returns the flat input index chosen for every output.
pub fn max_pool2d<S: Scalar>(input: &Tensor<S>, window: usize, stride: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    if window == 0 || stride == 0 {
        return Err(arg_err("max_pool2d", "window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(shape_err("max_pool2d", format!("window {window} exceeds spatial extent {h}x{w}")));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = ch * h * w + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([c, ho, wo], out)?, arg))
}

/// Non-overlapping average pooling by an integer factor (floor on extents).
pub fn avg_pool2d<S: Scalar>(input: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (c, h, w) = input.dims3()?;
    if factor == 0 || factor > h || factor > w {
        return Err(shape_err("avg_pool2d", format!("factor {factor} invalid for {h}x{w}")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let x = input.data();
    let norm = S::one() / S::lit((factor * factor) as f64);
    let mut out = vec![S::zero(); c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = S::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc = acc + x[ch * h * w + (oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                out[(ch * ho + oy) * wo + ox] = acc * norm;
            }
        }
    }
    Tensor::new([c, ho, wo], out)
}

pub(crate) fn avg_pool2d_backward<S: Scalar>(grad_out: &Tensor<S>, in_shape: &[usize], factor: usize) -> Result<Tensor<S>> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (_, ho, wo) = grad_out.dims3()?;
    let g = grad_out.data();
    let norm = S::one() / S::lit((factor * factor) as f64);
    let mut dx = vec![S::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[(ch * ho + oy) * wo + ox] * norm;
                for dy in 0..factor {
                    for dx_ in 0..factor {
                        dx[ch * h * w + (oy * factor + dy) * w + ox * factor + dx_] = gv;
                    }
                }
            }
        }
    }
    Tensor::new([c, h, w], dx)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<S: Scalar>(input: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (c, h, w) = input.dims3()?;
    if factor == 0 {
        return Err(arg_err("upsample_nearest", "factor must be at least 1"));
    }
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    Ok(Tensor::from_fn([c, ho, wo], |i| {
        let ch = i / (ho * wo);
        let oy = (i / wo) % ho;
        let ox = i % wo;
        x[ch * h * w + (oy / factor) * w + ox / factor]
    }))
}

pub(crate) fn upsample_nearest_backward<S: Scalar>(grad_out: &Tensor<S>, in_shape: &[usize], factor: usize) -> Result<Tensor<S>> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (_, ho, wo) = grad_out.dims3()?;
    let g = grad_out.data();
    let mut dx = vec![S::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let i = ch * h * w + (oy / factor) * w + ox / factor;
                dx[i] = dx[i] + g[(ch * ho + oy) * wo + ox];
            }
        }
    }
    Tensor::new([c, h, w], dx)
}

/// Source taps (index pairs and weights) for half-pixel bilinear resampling
/// along one axis.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `(out_h, out_w)` with half-pixel centres and edge clamping.
pub fn resize_bilinear<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(arg_err("resize_bilinear", "output extents must be positive"));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = vec![S::zero(); c * out_h * out_w];
    for ch in 0..c {
        let base = ch * h * w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = S::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = S::lit(fx);
                let top = x[base + y0 * w + x0] * (S::one() - fx) + x[base + y0 * w + x1] * fx;
                let bot = x[base + y1 * w + x0] * (S::one() - fx) + x[base + y1 * w + x1] * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (S::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

pub(crate) fn resize_bilinear_backward<S: Scalar>(grad_out: &Tensor<S>, in_shape: &[usize]) -> Result<Tensor<S>> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (_, out_h, out_w) = grad_out.dims3()?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let g = grad_out.data();
    let mut dx = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = S::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = S::lit(fx);
                let gv = g[(ch * out_h + oy) * out_w + ox];
                let top = gv * (S::one() - fy);
                let bot = gv * fy;
                dx[base + y0 * w + x0] = dx[base + y0 * w + x0] + top * (S::one() - fx);
                dx[base + y0 * w + x1] = dx[base + y0 * w + x1] + top * fx;
                dx[base + y1 * w + x0] = dx[base + y1 * w + x0] + bot * (S::one() - fx);
                dx[base + y1 * w + x1] = dx[base + y1 * w + x1] + bot * fx;
            }
        }
    }
    Tensor::new([c, h, w], dx)
}

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(arg_err("softmax", format!("axis {axis} out of range for rank {}", shape.len())));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max subtracted before exponentiation).
pub fn softmax<S: Scalar>(input: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, len, inner) = axis_split(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut m = S::neg_infinity();
            for a in 0..len {
                m = m.max(x[idx(a)]);
            }
            let mut total = S::zero();
            for a in 0..len {
                let e = (x[idx(a)] - m).exp();
                out[idx(a)] = e;
                total = total + e;
            }
            for a in 0..len {
                out[idx(a)] = out[idx(a)] / total;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, len, inner) = axis_split(output.shape(), axis)?;
    let y = output.data();
    let g = grad_out.data();
    let mut dx = vec![S::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let dot: S = (0..len).map(|a| y[idx(a)] * g[idx(a)]).sum();
            for a in 0..len {
                dx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
            }
        }
    }
    Tensor::new(output.shape().to_vec(), dx)
}

/// Per-pixel RMS normalization across channels of a `[C, H, W]` tensor:
/// `y = x / sqrt(mean_c(x^2) + eps)`.
pub fn rms_norm_channels<S: Scalar>(input: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let (c, h, w) = input.dims3()?;
    if c == 0 {
        return Err(shape_err("rms_norm_channels", "no channels"));
    }
    let hw = h * w;
    let x = input.data();
    let mut out = vec![S::zero(); x.len()];
    for i in 0..hw {
        let ms = (0..c).map(|ch| x[ch * hw + i] * x[ch * hw + i]).sum::<S>() / S::lit(c as f64);
        let inv = S::one() / (ms + eps).sqrt();
        for ch in 0..c {
            out[ch * hw + i] = x[ch * hw + i] * inv;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// `dx = (g - y * mean_c(g * y)) / r` with `r` the per-pixel RMS.
pub(crate) fn rms_norm_channels_backward<S: Scalar>(input: &Tensor<S>, output: &Tensor<S>, grad_out: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let (c, h, w) = input.dims3()?;
    let hw = h * w;
    let n = S::lit(c as f64);
    let (x, y, g) = (input.data(), output.data(), grad_out.data());
    let mut dx = vec![S::zero(); x.len()];
    for i in 0..hw {
        let ms = (0..c).map(|ch| x[ch * hw + i] * x[ch * hw + i]).sum::<S>() / n;
        let inv = S::one() / (ms + eps).sqrt();
        let dot = (0..c).map(|ch| g[ch * hw + i] * y[ch * hw + i]).sum::<S>() / n;
        for ch in 0..c {
            dx[ch * hw + i] = (g[ch * hw + i] - y[ch * hw + i] * dot) * inv;
        }
    }
    Tensor::new(input.shape().to_vec(), dx)
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<(Tensor<S>, u64)> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Ok((Tensor::new([m, n], out)?, (m * k * n) as u64))
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    Ok(Tensor::from_fn([n, m], |i| d[(i % m) * n + i / m]))
}

/// Stacks `a` and `b` along the channel axis.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (c1, h1, w1) = a.dims3()?;
    let (c2, h2, w2) = b.dims3()?;
    if (h1, w1) != (h2, w2) {
        return Err(shape_err(
            "concat_channels",
            format!("spatial extents differ: {h1}x{w1} vs {h2}x{w2}"),
        ));
    }
    let mut data = Vec::with_capacity((c1 + c2) * h1 * w1);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new([c1 + c2, h1, w1], data)
}

/// Channels `[start, start + count)` of a `[C, H, W]` tensor.
pub fn slice_channels<S: Scalar>(x: &Tensor<S>, start: usize, count: usize) -> Result<Tensor<S>> {
    let (c, h, w) = x.dims3()?;
    if start + count > c {
        return Err(shape_err(
            "slice_channels",
            format!("channels {start}..{} of {c}", start + count),
        ));
    }
    Tensor::new([count, h, w], x.data()[start * h * w..(start + count) * h * w].to_vec())
}
