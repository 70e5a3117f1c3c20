//! Histogram of streak orientations, Gaussian-uniform mixture fit and the
//! Kolmogorov-Smirnov gate.
//!
//! The histogram has one bin per integer degree in `[0, 179]`. Each streak
//! contributes a Gaussian kernel centred on its orientation, sampled at the
//! bin centres. The mixture treats the histogram as weighted samples at those
//! centres: a plain (non-wrapping) Gaussian over the orientation axis plus a
//! uniform floor of density 1/180.

use std::f64::consts::{PI, SQRT_2};

use statrs::function::erf::erfc;

use crate::streaks::StreakStats;

pub const BINS: usize = 180;
const UNIFORM_DENSITY: f64 = 1.0 / BINS as f64;
const MIN_SIGMA: f64 = 0.5;
const PI_CEILING: f64 = 1.0 - 1e-12;

/// Histogram of orientation of streaks.
#[derive(Debug, Clone, PartialEq)]
pub struct Hos {
    bins: [f64; BINS],
}

impl Default for Hos {
    fn default() -> Self {
        Hos { bins: [0.0; BINS] }
    }
}

impl Hos {
    /// Histogram from explicit bin values; negative or non-finite values are rejected.
    pub fn from_bins(bins: [f64; BINS]) -> Option<Self> {
        bins.iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            .then_some(Hos { bins })
    }

    pub fn bins(&self) -> &[f64; BINS] {
        &self.bins
    }

    pub fn total_mass(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn add(&self, other: &Hos) -> Hos {
        let mut out = self.clone();
        for (a, b) in out.bins.iter_mut().zip(other.bins.iter()) {
            *a += b;
        }
        out
    }

    /// Adds one Gaussian kernel of height `weight / (width * sqrt(2 pi))`.
    pub fn accumulate(&mut self, theta: f64, width: f64, weight: f64) {
        let norm = weight / (width * (2.0 * PI).sqrt());
        // beyond 40 widths the kernel is below f64 resolution of the peak
        let reach = 40.0 * width;
        let lo = ((theta - reach).floor().max(0.0)) as usize;
        let hi = ((theta + reach).ceil().min((BINS - 1) as f64)) as usize;
        if lo > hi {
            return;
        }
        for b in lo..=hi {
            let z = (b as f64 - theta) / width;
            self.bins[b] += norm * (-0.5 * z * z).exp();
        }
    }
}

/// Sum of per-streak Gaussian kernels evaluated at each integer degree.
///
/// `min_width` floors the kernel width in degrees; with widths well below
/// one bin the point-sampled kernel would miss the bin grid entirely. Pass
/// `0.0` for the unfloored sum.
pub fn build_hos(streaks: &[StreakStats], min_width: f64) -> Hos {
    let mut hos = Hos::default();
    for s in streaks {
        hos.accumulate(s.theta, s.dtheta.max(min_width), s.weight);
    }
    hos
}

/// Gaussian-uniform mixture parameters over orientation in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureParams {
    pub mu: f64,
    pub sigma: f64,
    pub pi: f64,
}

impl MixtureParams {
    /// Data-driven start: mode of the histogram, spread around it clamped to
    /// `[1, 45]` degrees, and an even split between the two components.
    pub fn initial_guess(hos: &Hos) -> Option<Self> {
        let total = hos.total_mass();
        if !(total > 0.0) {
            return None;
        }
        let mut mode = 0;
        for (b, &v) in hos.bins.iter().enumerate() {
            if v > hos.bins[mode] {
                mode = b;
            }
        }
        let mu = mode as f64;
        let var = hos
            .bins
            .iter()
            .enumerate()
            .map(|(b, &h)| h * (b as f64 - mu).powi(2))
            .sum::<f64>()
            / total;
        Some(MixtureParams {
            mu,
            sigma: var.sqrt().clamp(1.0, 45.0),
            pi: 0.5,
        })
    }

    fn rel_change(&self, other: &MixtureParams) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(1e-6);
        rel(self.mu, other.mu)
            .max(rel(self.sigma, other.sigma))
            .max(rel(self.pi, other.pi))
    }
}

#[inline]
fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

#[inline]
fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Histogram mass could not support a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("orientation histogram is empty")]
pub struct NoEvidence;

/// Negative log-likelihood of the histogram, each bin weighted by its mass.
pub fn neg_log_likelihood(hos: &Hos, p: &MixtureParams) -> f64 {
    hos.bins
        .iter()
        .enumerate()
        .filter(|(_, &h)| h > 0.0)
        .map(|(b, &h)| {
            let q = p.pi * gaussian_pdf(b as f64, p.mu, p.sigma) + (1.0 - p.pi) * UNIFORM_DENSITY;
            -h * q.ln()
        })
        .sum()
}

/// One expectation-maximisation step.
pub fn em_step(hos: &Hos, p: &MixtureParams) -> MixtureParams {
    let mut mass = 0.0;
    let mut r_mass = 0.0;
    let mut r_first = 0.0;
    let mut resp = [0.0; BINS];
    for (b, &h) in hos.bins.iter().enumerate() {
        if h <= 0.0 {
            continue;
        }
        let g = p.pi * gaussian_pdf(b as f64, p.mu, p.sigma);
        let q = g + (1.0 - p.pi) * UNIFORM_DENSITY;
        let r = if q > 0.0 { g / q } else { 0.0 };
        resp[b] = h * r;
        mass += h;
        r_mass += h * r;
        r_first += h * r * b as f64;
    }
    let pi = (r_mass / mass).clamp(0.0, PI_CEILING);
    if !(r_mass > 0.0) {
        return MixtureParams { pi, ..*p };
    }
    let mu = r_first / r_mass;
    let var = resp
        .iter()
        .enumerate()
        .map(|(b, &w)| w * (b as f64 - mu).powi(2))
        .sum::<f64>()
        / r_mass;
    MixtureParams {
        mu,
        sigma: var.sqrt().max(MIN_SIGMA),
        pi,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitReport {
    pub params: MixtureParams,
    pub iterations: usize,
    pub converged: bool,
    /// Kolmogorov-Smirnov distance of the fitted Gaussian.
    pub ks: f64,
}

/// Fits the mixture, stopping after `max_iterations` steps or once the
/// largest relative parameter change drops below `tolerance`.
pub fn em_fit(
    hos: &Hos,
    max_iterations: usize,
    tolerance: f64,
    init: MixtureParams,
) -> Result<FitReport, NoEvidence> {
    if !(hos.total_mass() > 0.0) {
        return Err(NoEvidence);
    }
    let mut params = MixtureParams {
        sigma: init.sigma.max(MIN_SIGMA),
        pi: init.pi.clamp(0.0, PI_CEILING),
        ..init
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        let next = em_step(hos, &params);
        iterations += 1;
        let change = params.rel_change(&next);
        params = next;
        if change < tolerance {
            converged = true;
            break;
        }
    }
    let ks = ks_statistic(hos, &params)?;
    Ok(FitReport {
        params,
        iterations,
        converged,
        ks,
    })
}

/// Fit starting from [`MixtureParams::initial_guess`].
pub fn em_fit_default(hos: &Hos, max_iterations: usize, tolerance: f64) -> Result<FitReport, NoEvidence> {
    let init = MixtureParams::initial_guess(hos).ok_or(NoEvidence)?;
    em_fit(hos, max_iterations, tolerance, init)
}

/// CDF of the Gaussian component truncated to the histogram support
/// `[-0.5, 179.5]`, so it reaches exactly 1 at the last bin edge.
///
/// Bin `b` covers `[b - 0.5, b + 0.5)`; the empirical CDF after bin `b` is
/// therefore compared against this function at `b + 0.5`.
pub fn truncated_gaussian_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let lo = std_normal_cdf((-0.5 - mu) / sigma);
    let hi = std_normal_cdf((BINS as f64 - 0.5 - mu) / sigma);
    let z = hi - lo;
    if !(z > 0.0) {
        // all Gaussian mass lies outside the support; fall back to a step at mu
        return if x >= mu { 1.0 } else { 0.0 };
    }
    ((std_normal_cdf((x - mu) / sigma) - lo) / z).clamp(0.0, 1.0)
}

/// Largest gap between the accumulated histogram and the fitted Gaussian CDF.
pub fn ks_statistic(hos: &Hos, params: &MixtureParams) -> Result<f64, NoEvidence> {
    let total = hos.total_mass();
    if !(total > 0.0) {
        return Err(NoEvidence);
    }
    let mut acc = 0.0;
    let mut d: f64 = 0.0;
    for (b, &h) in hos.bins.iter().enumerate() {
        acc += h;
        let empirical = acc / total;
        let model = truncated_gaussian_cdf(b as f64 + 0.5, params.mu, params.sigma);
        d = d.max((empirical - model).abs());
    }
    Ok(d.min(1.0))
}

/// A frame passes when the fit is close enough: `d <= d_c`.
pub fn ks_gate(d: f64, d_c: f64) -> bool {
    d <= d_c
}
