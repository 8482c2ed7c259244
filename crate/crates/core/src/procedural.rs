//! Procedural clean images: filtered-noise textures, checkerboards and gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradations::{blur_plane, gaussian_kernel, Edge};
use crate::error::{arg_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Texture,
    Checkerboard,
    Gradient,
    /// Texture over a gradient with a few hard-edged blocks.
    Natural,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Texture, Pattern::Checkerboard, Pattern::Gradient, Pattern::Natural];
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Texture => "texture",
            Pattern::Checkerboard => "checkerboard",
            Pattern::Gradient => "gradient",
            Pattern::Natural => "natural",
        })
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| arg_err("pattern", format!("unknown pattern {s:?}")))
    }
}

fn normalize(plane: &mut [f64], lo: f64, hi: f64) {
    let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(1e-12);
    for v in plane.iter_mut() {
        *v = lo + (hi - lo) * (*v - min) / span;
    }
}

/// Low-pass filtered white noise. Filtered periodically on a larger canvas
/// and cropped, so the result is not itself periodic (a periodic texture
/// has an unrealistically clean spectrum).
fn texture_plane(h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let (ch, cw) = (2 * h, 2 * w);
    let noise: Vec<f64> = (0..ch * cw).map(|_| rng.random::<f64>()).collect();
    let canvas = blur_plane(&noise, ch, cw, &gaussian_kernel(radius, sigma), Edge::Wrap);
    let (y0, x0) = (h / 2, w / 2);
    let mut p: Vec<f64> = (0..h * w).map(|i| canvas[(y0 + i / w) * cw + x0 + i % w]).collect();
    normalize(&mut p, 0.0, 1.0);
    p
}

/// Multi-octave filtered noise: coarse structure plus fine grain, roughly
/// the falling spectrum of natural images.
fn octaves(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    for (sigma, weight) in [(0.7, 0.12), (1.4, 0.2), (2.8, 0.3), (5.6, 0.38)] {
        let sigma = sigma * rng.random_range(0.8..1.25);
        for (a, v) in acc.iter_mut().zip(texture_plane(h, w, sigma, rng)) {
            *a += weight * v;
        }
    }
    normalize(&mut acc, 0.0, 1.0);
    acc
}

fn texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = octaves(h, w, rng);
    let tint: [f64; 3] = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)];
    let mut out = Vec::with_capacity(3 * h * w);
    for t in tint {
        let detail = texture_plane(h, w, 1.0, rng);
        let mut plane: Vec<f64> = base.iter().zip(&detail).map(|(b, d)| t * (0.85 * b + 0.15 * d)).collect();
        normalize(&mut plane, 0.1, 0.9);
        out.extend(plane);
    }
    out
}

fn checkerboard(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cell = rng.random_range(3..=10usize);
    let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.45));
    let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..0.95));
    (0..3)
        .flat_map(|c| (0..h * w).map(move |i| if ((i / w) / cell + (i % w) / cell).is_multiple_of(2) { a[c] } else { b[c] }))
        .collect()
}

fn gradient(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.4));
    let hi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..0.95));
    let diag = ((h * h + w * w) as f64).sqrt().max(1.0);
    (0..3)
        .flat_map(|ch| {
            (0..h * w).map(move |i| {
                let (y, x) = ((i / w) as f64 - h as f64 / 2.0, (i % w) as f64 - w as f64 / 2.0);
                let t = ((x * c + y * s) / diag + 0.5).clamp(0.0, 1.0);
                lo[ch] + (hi[ch] - lo[ch]) * t
            })
        })
        .collect()
}

fn natural(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let tex = texture(h, w, rng);
    let grad = gradient(h, w, rng);
    let mut out: Vec<f64> = tex.iter().zip(&grad).map(|(t, g)| 0.6 * t + 0.4 * g).collect();
    for _ in 0..rng.random_range(1..=3) {
        let (bh, bw) = (rng.random_range(h / 6..=h / 2 + 1), rng.random_range(w / 6..=w / 2 + 1));
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let shade: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
        for (ch, d) in shade.iter().enumerate() {
            for y in y0..(y0 + bh).min(h) {
                for x in x0..(x0 + bw).min(w) {
                    let v = &mut out[ch * h * w + y * w + x];
                    *v = (*v + d).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// A `[3, h, w]` image with values in `[0, 1]`, reproducible from `seed`.
pub fn clean_image<S: Scalar>(pattern: Pattern, h: usize, w: usize, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = match pattern {
        Pattern::Texture => texture(h, w, &mut rng),
        Pattern::Checkerboard => checkerboard(h, w, &mut rng),
        Pattern::Gradient => gradient(h, w, &mut rng),
        Pattern::Natural => natural(h, w, &mut rng),
    };
    Tensor::new([3, h, w], data.into_iter().map(S::lit).collect()).expect("3*h*w values")
}
