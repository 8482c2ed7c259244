//! Frequency-domain analysis of images.
//!
//! The pipeline is luminance, 2D DFT, centering (DC moved to
//! `(m/2, n/2)`), then the amplitude map. Band statistics over the
//! centered amplitude map characterize how a degradation redistributes
//! spectral energy: additive noise lifts the outer bands, blur drains them.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Complex 2D spectrum stored as separate real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<S = f64> {
    pub real: Tensor<S>,
    pub imag: Tensor<S>,
    pub centered: bool,
}

impl<S: Scalar> Spectrum<S> {
    pub fn dims(&self) -> (usize, usize) {
        self.real.dims2().expect("spectrum planes are matrices")
    }

    pub fn at(&self, u: usize, v: usize) -> Complex<S> {
        Complex::new(self.real.at(&[u, v]), self.imag.at(&[u, v]))
    }
}

/// Collapses a `[3, H, W]` or `[1, H, W]` image into a `[1, H, W]` luminance map.
pub fn to_luminance<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, h, w) = image.dims3()?;
    match c {
        1 => Ok(image.clone()),
        3 => {
            let d = image.data();
            let n = h * w;
            let [wr, wg, wb] = LUMA_WEIGHTS.map(S::lit);
            Tensor::new([1, h, w], (0..n).map(|i| wr * d[i] + wg * d[n + i] + wb * d[2 * n + i]).collect())
        }
        _ => Err(arg_err("to_luminance", format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// Unnormalized forward DFT, `F(u,v) = sum_x sum_y I(x,y) e^{-j2pi(ux/m + vy/n)}`,
/// where `x`/`u` index rows and `y`/`v` index columns.
pub fn dft2d<S: Scalar>(image: &Tensor<S>) -> Result<Spectrum<S>> {
    let (m, n) = image.dims2()?;
    if m == 0 || n == 0 {
        return Err(shape_err("dft2d", "empty image"));
    }
    image.ensure_finite("dft2d")?;
    let mut buf: Vec<Complex<S>> = image.data().iter().map(|&v| Complex::new(v, S::zero())).collect();
    let mut planner = FftPlanner::<S>::new();

    let row_fft = planner.plan_fft_forward(n);
    for row in buf.chunks_exact_mut(n) {
        row_fft.process(row);
    }

    let col_fft = planner.plan_fft_forward(m);
    let mut col = vec![Complex::new(S::zero(), S::zero()); m];
    for v in 0..n {
        for u in 0..m {
            col[u] = buf[u * n + v];
        }
        col_fft.process(&mut col);
        for u in 0..m {
            buf[u * n + v] = col[u];
        }
    }

    Ok(Spectrum {
        real: Tensor::new([m, n], buf.iter().map(|c| c.re).collect())?,
        imag: Tensor::new([m, n], buf.iter().map(|c| c.im).collect())?,
        centered: false,
    })
}

fn shift<S: Scalar>(t: &Tensor<S>, du: usize, dv: usize) -> Tensor<S> {
    let (m, n) = t.dims2().expect("matrix");
    let d = t.data();
    let mut out = vec![S::zero(); m * n];
    for u in 0..m {
        for v in 0..n {
            out[((u + du) % m) * n + (v + dv) % n] = d[u * n + v];
        }
    }
    Tensor::new([m, n], out).expect("same size")
}

/// Circular half-period shift that moves the DC bin to `(m/2, n/2)`.
pub fn center_spectrum<S: Scalar>(s: &Spectrum<S>) -> Result<Spectrum<S>> {
    if s.centered {
        return Err(arg_err("center_spectrum", "spectrum is already centered"));
    }
    let (m, n) = s.dims();
    Ok(Spectrum {
        real: shift(&s.real, m / 2, n / 2),
        imag: shift(&s.imag, m / 2, n / 2),
        centered: true,
    })
}

/// Inverse of [`center_spectrum`]; restores the natural bin layout.
pub fn uncenter_spectrum<S: Scalar>(s: &Spectrum<S>) -> Result<Spectrum<S>> {
    if !s.centered {
        return Err(arg_err("uncenter_spectrum", "spectrum is not centered"));
    }
    let (m, n) = s.dims();
    Ok(Spectrum {
        real: shift(&s.real, m - m / 2, n - n / 2),
        imag: shift(&s.imag, m - m / 2, n - n / 2),
        centered: false,
    })
}

/// `|F(u, v)|` for every bin.
pub fn amplitude<S: Scalar>(s: &Spectrum<S>) -> Tensor<S> {
    s.real.zip_map(&s.imag, |re, im| re.hypot(im)).expect("planes share a shape")
}

/// Centered amplitude map of an image's luminance, `[H, W]`.
pub fn amplitude_map<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let luma = to_luminance(image)?;
    let (_, h, w) = luma.dims3()?;
    let spec = dft2d(&luma.reshape([h, w])?)?;
    Ok(amplitude(&center_spectrum(&spec)?))
}

/// `ln(1 + M)` compression used before feeding amplitudes to a network.
pub fn log_compress<S: Scalar>(m: &Tensor<S>) -> Tensor<S> {
    m.map(|v| v.ln_1p())
}

fn centered_bins<S: Scalar>(m: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    let (rows, cols) = m.dims2()?;
    Ok((rows, cols, rows / 2, cols / 2))
}

/// Energy (`M^2`) fractions over `bands` equal-width annuli of normalized
/// radius `r / r_max`, DC excluded. Boundary bins fall into the lower band.
pub fn band_energy_profile<S: Scalar>(m: &Tensor<S>, bands: usize) -> Result<Vec<f64>> {
    if bands < 2 {
        return Err(arg_err("band_energy_profile", format!("need at least 2 bands, got {bands}")));
    }
    let (rows, cols, cu, cv) = centered_bins(m)?;
    let r_max = (0..rows)
        .flat_map(|u| (0..cols).map(move |v| (u, v)))
        .map(|(u, v)| radius(u, v, cu, cv))
        .fold(0.0, f64::max);
    let mut energy = vec![0.0; bands];
    for u in 0..rows {
        for v in 0..cols {
            if (u, v) == (cu, cv) {
                continue;
            }
            let r = radius(u, v, cu, cv) / r_max;
            let band = ((r * bands as f64).ceil() as usize).clamp(1, bands) - 1;
            let a = m.at(&[u, v]).as_f64();
            energy[band] += a * a;
        }
    }
    let total: f64 = energy.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "band_energy_profile",
            detail: "no energy outside the DC bin".into(),
        });
    }
    Ok(energy.into_iter().map(|e| e / total).collect())
}

fn radius(u: usize, v: usize, cu: usize, cv: usize) -> f64 {
    let du = u as f64 - cu as f64;
    let dv = v as f64 - cv as f64;
    du.hypot(dv)
}

/// Fraction of non-DC energy in bins whose direction from the centre lies
/// within `half_width_deg` of `angle_deg` (undirected, so modulo 180).
///
/// Angles are measured in image coordinates: 0 is along columns (+v), 90
/// along rows (+u).
pub fn directional_energy_fraction<S: Scalar>(m: &Tensor<S>, angle_deg: f64, half_width_deg: f64) -> Result<f64> {
    let (rows, cols, cu, cv) = centered_bins(m)?;
    let mut inside = 0.0;
    let mut total = 0.0;
    for u in 0..rows {
        for v in 0..cols {
            if (u, v) == (cu, cv) {
                continue;
            }
            let a = m.at(&[u, v]).as_f64();
            let e = a * a;
            total += e;
            let theta = (u as f64 - cu as f64).atan2(v as f64 - cv as f64).to_degrees();
            let mut diff = (theta - angle_deg).rem_euclid(180.0);
            if diff > 90.0 {
                diff = 180.0 - diff;
            }
            if diff <= half_width_deg {
                inside += e;
            }
        }
    }
    if total <= 0.0 {
        return Err(arg_err("directional_energy_fraction", "no energy outside the DC bin"));
    }
    Ok(inside / total)
}
