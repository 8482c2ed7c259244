#![allow(dead_code)]

use d3net::net::{D3Net, NetworkConfig};
use d3net::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1)`.
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Uniform values in `[0, 1)`.
pub fn rand_image(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random::<f64>())
}

/// Cross-correlation by explicit zero padding and six nested loops.
pub fn naive_conv(x: &Tensor, w: &Tensor, pad: usize, stride: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let mut padded = vec![0.0; ci * hp * wp];
    for c in 0..ci {
        for y in 0..h {
            for xx in 0..wd {
                padded[c * hp * wp + (y + pad) * wp + xx + pad] = x.at(&[c, y, xx]);
            }
        }
    }
    let ho = (hp - k) / stride + 1;
    let wo = (wp - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += padded[c * hp * wp + (oy * stride + ky) * wp + ox * stride + kx] * w.at(&[o, c, ky, kx]);
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new([co, ho, wo], out).unwrap()
}

/// Depthwise convolution as a full convolution with a block-diagonal kernel.
pub fn naive_depthwise(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let (c, k) = (w.shape()[0], w.shape()[1]);
    let full = Tensor::from_fn([c, c, k, k], |i| {
        let (o, rest) = (i / (c * k * k), i % (c * k * k));
        let (ci, r) = (rest / (k * k), rest % (k * k));
        if o == ci {
            w.at(&[o, r / k, r % k])
        } else {
            0.0
        }
    });
    naive_conv(x, &full, pad, 1)
}

/// Direct double-sum DFT of an `[M, N]` array: `(re, im)`.
pub fn naive_dft(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut re = vec![0.0; m * n];
    let mut im = vec![0.0; m * n];
    for u in 0..m {
        for v in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for a in 0..m {
                for b in 0..n {
                    let phase = -2.0 * std::f64::consts::PI * ((u * a) as f64 / m as f64 + (v * b) as f64 / n as f64);
                    sr += x.at(&[a, b]) * phase.cos();
                    si += x.at(&[a, b]) * phase.sin();
                }
            }
            re[u * n + v] = sr;
            im[u * n + v] = si;
        }
    }
    (re, im)
}

pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        unet_depth: 2,
        stages: 2,
        freq_channels: 4,
        prompt_dim: 8,
        strategy_dim: 4,
        ..Default::default()
    }
}

pub fn tiny_net() -> D3Net {
    D3Net::new(tiny_config()).unwrap()
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "{what}: max abs diff {d:e} > {tol:e}");
}

/// Half-pixel-centred bilinear resampling, clamped at the borders.
pub fn bilinear_reference(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    let sample = |ch: usize, sy: f64, sx: f64| {
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let sx = sx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let p = |y: usize, xx: usize| x.at(&[ch, y, xx]);
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    };
    Tensor::from_fn([c, oh, ow], |i| {
        let (ch, r) = (i / (oh * ow), i % (oh * ow));
        let sy = (r / ow) as f64 * h as f64 / oh as f64 + 0.5 * h as f64 / oh as f64 - 0.5;
        let sx = (r % ow) as f64 * w as f64 / ow as f64 + 0.5 * w as f64 / ow as f64 - 0.5;
        sample(ch, sy, sx)
    })
}

/// Per-pixel RMS normalization across channels, one pixel at a time.
pub fn rms_norm_reference(x: &Tensor, eps: f64) -> Tensor {
    let (c, h, w) = x.dims3().unwrap();
    Tensor::from_fn([c, h, w], |i| {
        let px = i % (h * w);
        let ms = (0..c).map(|k| x.data()[k * h * w + px].powi(2)).sum::<f64>() / c as f64;
        x.data()[i] / (ms + eps).sqrt()
    })
}
