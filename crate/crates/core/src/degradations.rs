//! Seeded synthetic degradations producing (degraded, clean) pairs.
//!
//! Every generator is the identity at its neutral parameters and keeps
//! outputs in `[0, 1]`. The same spec applied to the same image always
//! yields the same result.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// Additive white Gaussian noise; `sigma` on the 0..255 scale.
    GaussianNoise { sigma: f64 },
    /// Normalized Gaussian kernel of half-width `radius`, edges replicated.
    GaussianBlur { radius: usize, sigma: f64 },
    /// Additive bright line segments. `density` is streaks per pixel,
    /// `angle` is in degrees (0 runs along a row, 90 down a column).
    RainStreaks { density: f64, length: f64, angle: f64, intensity: f64 },
    /// `I t + A (1 - t)` with uniform transmission `t` and airlight `A`.
    Haze { transmission: f64, airlight: f64 },
    /// `I^gamma * scale`.
    LowLight { gamma: f64, scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: Degradation,
    pub seed: u64,
}

impl Degradation {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Degradation::GaussianNoise { .. } => "gaussian_noise",
            Degradation::GaussianBlur { .. } => "gaussian_blur",
            Degradation::RainStreaks { .. } => "rain_streaks",
            Degradation::Haze { .. } => "haze",
            Degradation::LowLight { .. } => "low_light",
        }
    }

    /// `key=value` pairs joined by `;`.
    pub fn params_string(&self) -> String {
        match *self {
            Degradation::GaussianNoise { sigma } => format!("sigma={sigma}"),
            Degradation::GaussianBlur { radius, sigma } => format!("radius={radius};sigma={sigma}"),
            Degradation::RainStreaks { density, length, angle, intensity } => {
                format!("density={density};length={length};angle={angle};intensity={intensity}")
            }
            Degradation::Haze { transmission, airlight } => format!("transmission={transmission};airlight={airlight}"),
            Degradation::LowLight { gamma, scale } => format!("gamma={gamma};scale={scale}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(arg_err("degradation", format!("{} out of range: {what}", self.kind_name())))
            }
        };
        match *self {
            Degradation::GaussianNoise { sigma } => check((0.0..=100.0).contains(&sigma), "sigma in [0, 100]"),
            Degradation::GaussianBlur { radius, sigma } => {
                check(radius <= 15, "radius in [0, 15]")?;
                check(sigma > 0.0 && sigma <= 10.0, "sigma in (0, 10]")
            }
            Degradation::RainStreaks { density, length, angle, intensity } => {
                check((0.0..=0.05).contains(&density), "density in [0, 0.05]")?;
                check((1.0..=64.0).contains(&length), "length in [1, 64]")?;
                check((0.0..180.0).contains(&angle), "angle in [0, 180)")?;
                check((0.0..=1.0).contains(&intensity), "intensity in [0, 1]")
            }
            Degradation::Haze { transmission, airlight } => {
                check(transmission > 0.0 && transmission <= 1.0, "transmission in (0, 1]")?;
                check((0.7..=1.0).contains(&airlight), "airlight in [0.7, 1]")
            }
            Degradation::LowLight { gamma, scale } => {
                check((1.0..=5.0).contains(&gamma), "gamma in [1, 5]")?;
                check(scale > 0.0 && scale <= 1.0, "scale in (0, 1]")
            }
        }
    }

    /// Reasonable default parameters for a kind name.
    pub fn default_for(kind: &str) -> Result<Self> {
        Ok(match kind {
            "gaussian_noise" => Degradation::GaussianNoise { sigma: 25.0 },
            "gaussian_blur" => Degradation::GaussianBlur { radius: 3, sigma: 1.5 },
            "rain_streaks" => Degradation::RainStreaks { density: 0.01, length: 12.0, angle: 80.0, intensity: 0.6 },
            "haze" => Degradation::Haze { transmission: 0.6, airlight: 0.9 },
            "low_light" => Degradation::LowLight { gamma: 2.0, scale: 0.5 },
            other => return Err(arg_err("degradation", format!("unknown kind {other:?}"))),
        })
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind_name(), self.params_string())
    }
}

impl FromStr for Degradation {
    type Err = Error;

    /// `kind[:key=value[;key=value...]]`; unspecified keys keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, params) = s.split_once(':').unwrap_or((s, ""));
        let mut d = Degradation::default_for(kind.trim())?;
        for pair in params.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| arg_err("degradation", format!("expected key=value, got {pair:?}")))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| arg_err("degradation", format!("{key}: not a number: {value:?}")))?;
            let key = key.trim();
            let slot = match (&mut d, key) {
                (Degradation::GaussianNoise { sigma }, "sigma") => sigma,
                (Degradation::GaussianBlur { radius, .. }, "radius") => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(arg_err("degradation", format!("radius must be a non-negative integer, got {v}")));
                    }
                    *radius = v as usize;
                    continue;
                }
                (Degradation::GaussianBlur { sigma, .. }, "sigma") => sigma,
                (Degradation::RainStreaks { density, .. }, "density") => density,
                (Degradation::RainStreaks { length, .. }, "length") => length,
                (Degradation::RainStreaks { angle, .. }, "angle") => angle,
                (Degradation::RainStreaks { intensity, .. }, "intensity") => intensity,
                (Degradation::Haze { transmission, .. }, "transmission") => transmission,
                (Degradation::Haze { airlight, .. }, "airlight") => airlight,
                (Degradation::LowLight { gamma, .. }, "gamma") => gamma,
                (Degradation::LowLight { scale, .. }, "scale") => scale,
                _ => return Err(arg_err("degradation", format!("{kind}: unknown parameter {key:?}"))),
            };
            *slot = v;
        }
        d.validate()?;
        Ok(d)
    }
}

/// Normalized 1D Gaussian taps of half-width `radius`.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    Replicate,
    Wrap,
}

/// Separable filtering of an `h x w` plane with the given boundary rule.
pub fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64], edge: Edge) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let idx = |i: isize, n: usize| -> usize {
        match edge {
            Edge::Replicate => i.clamp(0, n as isize - 1) as usize,
            Edge::Wrap => i.rem_euclid(n as isize) as usize,
        }
    };
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &t)| t * plane[y * w + idx(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &t)| t * rows[idx(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn rain_mask(h: usize, w: usize, density: f64, length: f64, angle: f64, intensity: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut mask = vec![0.0f64; h * w];
    let count = (density * (h * w) as f64).round() as usize;
    let (dy, dx) = angle.to_radians().sin_cos();
    let steps = (2.0 * length).ceil() as usize;
    for _ in 0..count {
        let y0: f64 = rng.random_range(0.0..h as f64);
        let x0: f64 = rng.random_range(0.0..w as f64);
        let alpha: f64 = rng.random_range(0.6..1.0) * intensity;
        for s in 0..=steps {
            let t = s as f64 * 0.5;
            let y = (y0 + t * dy).round() as isize;
            let x = (x0 + t * dx).round() as isize;
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            let m = &mut mask[y as usize * w + x as usize];
            *m = m.max(alpha);
        }
    }
    mask
}

/// Degrades a `[C, H, W]` image with values in `[0, 1]`.
pub fn apply<S: Scalar>(spec: &DegradationSpec, clean: &Tensor<S>) -> Result<Tensor<S>> {
    spec.kind.validate()?;
    let (c, h, w) = clean.dims3()?;
    if clean.data().iter().any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(arg_err("degradation", "clean image values must lie in [0, 1]"));
    }
    let clamp = |v: f64| S::lit(v.clamp(0.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out = match spec.kind {
        Degradation::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return Ok(clean.clone());
            }
            let normal = Normal::new(0.0, sigma / 255.0).expect("positive sigma");
            Tensor::from_fn([c, h, w], |i| clamp(clean.data()[i].as_f64() + normal.sample(&mut rng)))
        }
        Degradation::GaussianBlur { radius, sigma } => {
            if radius == 0 {
                return Ok(clean.clone());
            }
            let k = gaussian_kernel(radius, sigma);
            let plane = h * w;
            let mut data = Vec::with_capacity(clean.numel());
            for ch in 0..c {
                let p: Vec<f64> = clean.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
                data.extend(blur_plane(&p, h, w, &k, Edge::Replicate).into_iter().map(clamp));
            }
            Tensor::new([c, h, w], data)?
        }
        Degradation::RainStreaks { density, length, angle, intensity } => {
            if density == 0.0 || intensity == 0.0 {
                return Ok(clean.clone());
            }
            let mask = rain_mask(h, w, density, length, angle, intensity, &mut rng);
            let plane = h * w;
            Tensor::from_fn([c, h, w], |i| clamp(clean.data()[i].as_f64() + mask[i % plane]))
        }
        Degradation::Haze { transmission, airlight } => {
            let (t, a) = (S::lit(transmission), S::lit(airlight));
            clean.map(|v| (v * t + a * (S::one() - t)).max(S::zero()).min(S::one()))
        }
        Degradation::LowLight { gamma, scale } => {
            let (g, s) = (S::lit(gamma), S::lit(scale));
            clean.map(|v| v.powf(g) * s)
        }
    };
    Ok(out)
}
