//! Joint laser-sensor response, intensity offset and Poisson noise.
//!
//! The response is the convolution of a Gaussian laser pulse of area `I_l`
//! and width `sigma_ls` with a one-sided exponential sensor decay of rate
//! `kappa_s`, i.e. an exponentially modified Gaussian. It is sampled in
//! closed form on the bin lattice; the sensor jitter offset is fixed at 0.

use libm::erfc;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transient::TransientCube;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserSensorParams {
    /// Laser intensity `I_l`, linear units.
    pub intensity: f64,
    /// Joint Gaussian width, seconds.
    pub sigma_ls: f64,
    /// Sensor decay rate, 1/seconds.
    pub kappa_s: f64,
    /// Additive intensity offset.
    pub eta_s: f64,
}

impl LaserSensorParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.intensity) || !ok(self.sigma_ls) || !ok(self.kappa_s) {
            return Err(Error::InvalidArgument(format!(
                "laser-sensor parameters must be positive (I_l={}, sigma_ls={}, kappa_s={})",
                self.intensity, self.sigma_ls, self.kappa_s
            )));
        }
        if !(self.eta_s.is_finite() && self.eta_s >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eta_s must be >= 0, got {}",
                self.eta_s
            )));
        }
        Ok(())
    }

    /// Smallest admissible kernel half-width in bins.
    pub fn min_support(&self, bin_width: f64) -> usize {
        ((4.0 * self.sigma_ls + 6.0 / self.kappa_s) / bin_width).ceil() as usize
    }

    /// Kernel half-width used by [`apply_sensor`]; keeps the truncated mass
    /// below 1e-4 of `I_l`.
    pub fn default_support(&self, bin_width: f64) -> usize {
        let k = ((5.0 * self.sigma_ls + 10.0 / self.kappa_s) / bin_width).ceil() as usize;
        k.max(self.min_support(bin_width))
    }
}

/// `exp(z²)·erfc(z)` for `z ≥ 0`.
fn erfcx(z: f64) -> f64 {
    if z < 2.0 {
        return (z * z).exp() * erfc(z);
    }
    // continued fraction, evaluated backwards; 60 terms reach double
    // precision for z ≥ 2
    let mut acc = 0.0;
    for k in (1..=60).rev() {
        acc = (0.5 * k as f64) / (z + acc);
    }
    1.0 / (std::f64::consts::PI.sqrt() * (z + acc))
}

/// Unit-area exponentially modified Gaussian at time `t`.
fn emg(t: f64, sigma: f64, kappa: f64) -> f64 {
    let z = (kappa * sigma - t / sigma) / std::f64::consts::SQRT_2;
    if z >= 0.0 {
        0.5 * kappa * (-t * t / (2.0 * sigma * sigma)).exp() * erfcx(z)
    } else {
        0.5 * kappa * (0.5 * kappa * kappa * sigma * sigma - kappa * t).exp() * erfc(z)
    }
}

fn gauss_pdf(t: f64, sigma: f64) -> f64 {
    (-t * t / (2.0 * sigma * sigma)).exp() / (sigma * (std::f64::consts::TAU).sqrt())
}

/// Samples `Ψ(kΔ)` for `k ∈ [-support, support]`.
pub fn psi_kernel(p: &LaserSensorParams, bin_width: f64, support_bins: usize) -> Result<Vec<f64>> {
    p.validate()?;
    if !(bin_width > 0.0) {
        return Err(Error::InvalidArgument("bin_width must be positive".into()));
    }
    let min = p.min_support(bin_width);
    if support_bins < min {
        return Err(Error::InvalidArgument(format!(
            "kernel support {support_bins} below minimum {min}"
        )));
    }
    let k = support_bins as i64;
    Ok((-k..=k)
        .map(|i| p.intensity * emg(i as f64 * bin_width, p.sigma_ls, p.kappa_s))
        .collect())
}

/// Kernel samples and their partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiWithGrad {
    pub support: usize,
    pub psi: Vec<f64>,
    pub d_intensity: Vec<f64>,
    pub d_sigma: Vec<f64>,
    pub d_kappa: Vec<f64>,
}

pub fn psi_kernel_with_grad(
    p: &LaserSensorParams,
    bin_width: f64,
    support_bins: usize,
) -> Result<PsiWithGrad> {
    let psi = psi_kernel(p, bin_width, support_bins)?;
    let (s, kap, il) = (p.sigma_ls, p.kappa_s, p.intensity);
    let k = support_bins as i64;
    let mut d_intensity = Vec::with_capacity(psi.len());
    let mut d_sigma = Vec::with_capacity(psi.len());
    let mut d_kappa = Vec::with_capacity(psi.len());
    for (j, i) in (-k..=k).enumerate() {
        let t = i as f64 * bin_width;
        let f = psi[j] / il;
        let g = gauss_pdf(t, s);
        d_intensity.push(f);
        d_kappa.push(il * (f * (1.0 / kap + kap * s * s - t) - kap * s * s * g));
        d_sigma.push(il * (kap * kap * s * f - kap * (kap * s * s + t) * g / s));
    }
    Ok(PsiWithGrad {
        support: support_bins,
        psi,
        d_intensity,
        d_sigma,
        d_kappa,
    })
}

/// `out[τ] = Δ Σ_k ψ[k] h[τ-k]` with zero padding; `psi` is centered.
pub(crate) fn convolve_centered(h: &[f64], psi: &[f64], bin_width: f64, out: &mut [f64]) {
    let k = (psi.len() / 2) as i64;
    let n = h.len() as i64;
    out.iter_mut().for_each(|v| *v = 0.0);
    for (src, &hv) in h.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        let lo = (src as i64 - k).max(0);
        let hi = (src as i64 + k).min(n - 1);
        for tau in lo..=hi {
            out[tau as usize] += bin_width * psi[(tau - src as i64 + k) as usize] * hv;
        }
    }
}

/// Adjoint of [`convolve_centered`] in `h`.
pub(crate) fn correlate_centered(g: &[f64], psi: &[f64], bin_width: f64, out: &mut [f64]) {
    let k = (psi.len() / 2) as i64;
    let n = g.len() as i64;
    for (src, o) in out.iter_mut().enumerate() {
        let lo = (src as i64 - k).max(0);
        let hi = (src as i64 + k).min(n - 1);
        let mut acc = 0.0;
        for tau in lo..=hi {
            acc += psi[(tau - src as i64 + k) as usize] * g[tau as usize];
        }
        *o = bin_width * acc;
    }
}

/// Adjoint of [`convolve_centered`] in `psi`: accumulates into `out`.
pub(crate) fn kernel_adjoint(g: &[f64], h: &[f64], bin_width: f64, out: &mut [f64]) {
    let k = (out.len() / 2) as i64;
    let n = h.len() as i64;
    for (src, &hv) in h.iter().enumerate() {
        if hv == 0.0 {
            continue;
        }
        let lo = (src as i64 - k).max(0);
        let hi = (src as i64 + k).min(n - 1);
        for tau in lo..=hi {
            out[(tau - src as i64 + k) as usize] += bin_width * g[tau as usize] * hv;
        }
    }
}

/// `H_R = Ψ * H_r + η_s`, per pixel, zero-padded.
pub fn apply_sensor(h: &TransientCube, p: &LaserSensorParams) -> Result<TransientCube> {
    let support = p.default_support(h.bin_width);
    apply_sensor_with_support(h, p, support)
}

pub fn apply_sensor_with_support(
    h: &TransientCube,
    p: &LaserSensorParams,
    support: usize,
) -> Result<TransientCube> {
    if h.values.len() != h.num_pixels() * h.num_bins {
        return Err(Error::Shape(
            "cube value count does not match its dimensions".into(),
        ));
    }
    let psi = psi_kernel(p, h.bin_width, support)?;
    let mut out = h.clone();
    let t = h.num_bins;
    out.values
        .par_chunks_mut(t)
        .zip(h.values.par_chunks(t))
        .for_each(|(o, src)| {
            convolve_centered(src, &psi, h.bin_width, o);
            o.iter_mut().for_each(|v| *v += p.eta_s);
        });
    Ok(out)
}

/// Above this expected count the Poisson draw is replaced by its mean.
const POISSON_MEAN_LIMIT: f64 = 1e15;

/// Replaces each bin `v` by `Poisson(v·scale)/scale`; the draw for bin
/// `(l, s, t)` depends only on `seed` and that index.
pub fn add_poisson_noise(h: &TransientCube, photon_scale: f64, seed: u64) -> Result<TransientCube> {
    if !(photon_scale > 0.0 && photon_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "photon_scale must be positive, got {photon_scale}"
        )));
    }
    if let Some(v) = h.values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "Poisson noise needs nonnegative input, found {v}"
        )));
    }
    let mut out = h.clone();
    out.values.par_iter_mut().enumerate().for_each(|(i, v)| {
        let lambda = *v * photon_scale;
        *v = if lambda == 0.0 {
            0.0
        } else if lambda > POISSON_MEAN_LIMIT {
            *v
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Poisson::new(lambda)
                .expect("positive finite rate")
                .sample(&mut rng)
                / photon_scale
        };
    });
    Ok(out)
}

/// `10·log10(Σ clean² / Σ (clean − noisy)²)`; `+∞` for identical cubes.
pub fn snr_db(clean: &TransientCube, noisy: &TransientCube) -> Result<f64> {
    if !clean.same_shape(noisy) {
        return Err(Error::Shape("snr needs cubes of identical shape".into()));
    }
    let signal: f64 = clean.values.iter().map(|v| v * v).sum();
    let noise: f64 = clean
        .values
        .iter()
        .zip(&noisy.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}
