//! Plug-and-play ADMM despeckling and the homomorphic baseline.
//!
//! With `y` the log-channel observation, every pipeline iterates
//!
//! ```text
//! z <- f_sigma(x - d)   per channel, sigma = beta^{-1/2}
//! d <- d + z - x
//! x <- fidelity prox of (z + d)
//! ```
//!
//! from `x = y`, `z = f_1(y)`, `d = z - x`, for a fixed number of iterations.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::channelizer::{calibrate_logs, condition_input, ChannelBasis};
use crate::denoise::{checked_denoise, Denoiser};
use crate::error::{Error, Result};
use crate::fidelity::{solve_image, NewtonOptions};
use crate::filters::mad_std;
use crate::hermitian::mat_log_stack;
use crate::image::{CovarianceImage, LogChannelImage, Plane};
use crate::statistics::{ft_stats, neg_log_likelihood};

pub const DEFAULT_OUTER_ITERS: usize = 6;
pub const DEFAULT_GAMMA: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BetaSchedule {
    #[default]
    Fixed,
    /// `beta <- gamma beta` after every iteration (`gamma > 1`).
    Increasing(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulogOptions {
    pub outer_iters: usize,
    /// Fidelity weight; `None` selects the method's default.
    pub beta: Option<f64>,
    pub newton: NewtonOptions,
    pub beta_schedule: BetaSchedule,
    /// Start every inner solve from the previous `x` instead of `y`.
    pub warm_start: bool,
    /// Evaluate the objective after every iteration (one extra likelihood pass).
    pub track_objective: bool,
}

impl Default for MulogOptions {
    fn default() -> Self {
        MulogOptions {
            outer_iters: DEFAULT_OUTER_ITERS,
            beta: None,
            newton: NewtonOptions::default(),
            beta_schedule: BetaSchedule::Fixed,
            warm_start: false,
            track_objective: false,
        }
    }
}

impl MulogOptions {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::InvalidInput(
                "outer iterations must be at least 1".into(),
            ));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "beta must be positive, got {b}"
                )));
            }
        }
        if let BetaSchedule::Increasing(g) = self.beta_schedule {
            if !(g > 1.0 && g.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "beta growth factor must exceed 1, got {g}"
                )));
            }
        }
        self.newton.validate()
    }
}

/// `1 + 2/L`.
pub fn default_beta(looks: f64) -> f64 {
    1.0 + 2.0 / looks
}

/// `(1 + 2/L) / psi'(L)`, the same rule for unstandardised log intensities.
pub fn default_midal_beta(looks: f64) -> Result<f64> {
    Ok(default_beta(looks) / ft_stats(looks)?.variance)
}

/// One line of the iteration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub beta: f64,
    pub sigma: f64,
    /// Likelihood plus the denoiser's penalty, when both are available.
    pub objective: Option<f64>,
    pub neg_log_likelihood: Option<f64>,
    /// `||z - x||` over all channels.
    pub z_minus_x: f64,
    /// Robust standard deviation of `y - x` per channel.
    pub residual_mad: Vec<f64>,
}

pub fn write_records(records: &[IterationRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdmmOutput {
    pub x: LogChannelImage,
    pub records: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct MulogOutput {
    pub estimate: CovarianceImage,
    pub basis: ChannelBasis,
    pub x: LogChannelImage,
    pub records: Vec<IterationRecord>,
}

/// Applies `den` to every channel, concurrently when the denoiser allows it.
pub fn denoise_channels(
    den: &dyn Denoiser,
    img: &LogChannelImage,
    sigma: f64,
) -> Result<LogChannelImage> {
    let run = |i: usize| checked_denoise(den, &img.channel_plane(i), sigma).map(Plane::into_data);
    let channels: Vec<Vec<f64>> = if den.reentrant() {
        (0..img.n_channels())
            .into_par_iter()
            .map(run)
            .collect::<Result<_>>()?
    } else {
        (0..img.n_channels()).map(run).collect::<Result<_>>()?
    };
    LogChannelImage::from_channels(img.width(), img.height(), channels)
}

fn combine(
    a: &LogChannelImage,
    b: &LogChannelImage,
    f: impl Fn(f64, f64) -> f64 + Sync,
) -> LogChannelImage {
    let channels = a
        .channels()
        .iter()
        .zip(b.channels())
        .map(|(u, v)| u.iter().zip(v).map(|(p, q)| f(*p, *q)).collect())
        .collect();
    LogChannelImage::from_channels(a.width(), a.height(), channels).expect("same shape")
}

/// The ADMM loop on a log-channel image for a given channel map.
pub fn admm_core(
    y: &LogChannelImage,
    basis: &ChannelBasis,
    looks: f64,
    beta0: f64,
    opts: &MulogOptions,
    den: &dyn Denoiser,
) -> Result<AdmmOutput> {
    opts.validate()?;
    if !(looks > 0.0 && looks.is_finite()) {
        return Err(Error::Domain(format!(
            "number of looks must be positive, got {looks}"
        )));
    }
    if !y.is_finite() {
        return Err(Error::InvalidInput(
            "log-channel image contains non-finite values".into(),
        ));
    }
    let mut x = y.clone();
    let mut z = denoise_channels(den, y, 1.0)?;
    let mut d = combine(&z, &x, |a, b| a - b);
    let mut beta = beta0;
    let mut records = Vec::with_capacity(opts.outer_iters);
    for iter in 1..=opts.outer_iters {
        let sigma = beta.powf(-0.5);
        z = denoise_channels(den, &combine(&x, &d, |a, b| a - b), sigma)?;
        d = combine(&d, &combine(&z, &x, |a, b| a - b), |a, b| a + b);
        let anchor = combine(&z, &d, |a, b| a + b);
        let start = opts.warm_start.then_some(&x);
        x = solve_image(y, &anchor, start, beta, looks, basis, &opts.newton)?;
        records.push(record(
            iter,
            beta,
            sigma,
            y,
            &x,
            &z,
            looks,
            basis,
            den,
            opts.track_objective,
        )?);
        if let BetaSchedule::Increasing(g) = opts.beta_schedule {
            beta *= g;
        }
    }
    Ok(AdmmOutput { x, records })
}

#[allow(clippy::too_many_arguments)]
fn record(
    iter: usize,
    beta: f64,
    sigma: f64,
    y: &LogChannelImage,
    x: &LogChannelImage,
    z: &LogChannelImage,
    looks: f64,
    basis: &ChannelBasis,
    den: &dyn Denoiser,
    track_objective: bool,
) -> Result<IterationRecord> {
    let z_minus_x = z
        .channels()
        .iter()
        .flatten()
        .zip(x.channels().iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let residual_mad = y
        .channels()
        .par_iter()
        .zip(x.channels())
        .map(|(yc, xc)| {
            let r: Vec<f64> = yc.iter().zip(xc).map(|(a, b)| a - b).collect();
            mad_std(&r)
        })
        .collect();
    let (objective, nll) = if track_objective {
        let nll = neg_log_likelihood(x, y, looks, basis)?;
        let penalty: Option<f64> = (0..x.n_channels())
            .map(|i| den.penalty(&x.channel_plane(i)))
            .sum();
        (penalty.map(|p| p + nll), Some(nll))
    } else {
        (None, None)
    };
    Ok(IterationRecord {
        iter,
        beta,
        sigma,
        objective,
        neg_log_likelihood: nll,
        z_minus_x,
        residual_mad,
    })
}

/// Multichannel despeckling of a covariance image with `L` looks.
pub fn mulog(
    c: &CovarianceImage,
    looks: f64,
    opts: &MulogOptions,
    den: &dyn Denoiser,
) -> Result<MulogOutput> {
    if !(looks > 0.0 && looks.is_finite()) {
        return Err(Error::Domain(format!(
            "number of looks must be positive, got {looks}"
        )));
    }
    let conditioned = condition_input(c, looks)?;
    let logs = mat_log_stack(conditioned.stack())?;
    let basis = calibrate_logs(c.width(), c.height(), &logs)?;
    let y = basis.decompose(c.width(), c.height(), &logs)?;
    let beta = opts.beta.unwrap_or_else(|| default_beta(looks));
    let out = admm_core(&y, &basis, looks, beta, opts, den)?;
    let estimate = basis.to_covariance(&out.x)?;
    if let Some(k) = estimate.stack().planes()[..estimate.dim()]
        .iter()
        .find_map(|p| p.iter().position(|v| !(*v > 0.0 && v.is_finite())))
    {
        return Err(Error::InvalidData {
            pixel: k,
            reason: "estimate is not positive definite".into(),
        });
    }
    Ok(MulogOutput {
        estimate,
        basis,
        x: out.x,
        records: out.records,
    })
}

fn log_intensity(i: &Plane) -> Result<LogChannelImage> {
    if let Some(k) = i.data().iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidData {
            pixel: k,
            reason: format!("intensity {} is not positive", i.data()[k]),
        });
    }
    LogChannelImage::from_channels(
        i.width(),
        i.height(),
        vec![i.data().iter().map(|v| v.ln()).collect()],
    )
}

/// Single-channel ADMM directly on `log I` (no standardisation).
pub fn midal(
    i: &Plane,
    looks: f64,
    opts: &MulogOptions,
    den: &dyn Denoiser,
) -> Result<(Plane, Vec<IterationRecord>)> {
    let y = log_intensity(i)?;
    let beta = match opts.beta {
        Some(b) => b,
        None => default_midal_beta(looks)?,
    };
    let out = admm_core(&y, &ChannelBasis::identity(1), looks, beta, opts, den)?;
    let r = out.x.channel_plane(0).map(f64::exp);
    Ok((r, out.records))
}

/// Denoise `log I` once at `sigma^2 = psi'(L)`, remove the log bias, exponentiate.
pub fn homomorphic(i: &Plane, looks: f64, den: &dyn Denoiser) -> Result<Plane> {
    let y = log_intensity(i)?;
    let stats = ft_stats(looks)?;
    let z = checked_denoise(den, &y.channel_plane(0), stats.variance.sqrt())?;
    Ok(z.map(|v| (v - stats.bias).exp()))
}
