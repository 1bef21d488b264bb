//! Gaussian denoisers plugged into the despeckling loop.
//!
//! A denoiser maps a noisy real plane and the standard deviation of its
//! (assumed white Gaussian) noise to an estimate of the clean plane.

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Plane;
use crate::statistics::block_rng;

pub mod external;
pub mod gaussian;
pub mod tv;

pub use external::ExternalDenoiser;
pub use gaussian::GaussianSmoothing;
pub use tv::{total_variation, tv_denoise, TvConfig, TvDenoiser};

pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;

    fn denoise(&self, img: &Plane, sigma: f64) -> Result<Plane>;

    /// Whether concurrent calls on distinct planes are allowed.
    fn reentrant(&self) -> bool {
        true
    }

    /// Value of the regulariser the denoiser is the proximal map of, if known.
    fn penalty(&self, _img: &Plane) -> Option<f64> {
        None
    }
}

/// Calls `d` and checks the output shape and finiteness.
pub fn checked_denoise(d: &dyn Denoiser, img: &Plane, sigma: f64) -> Result<Plane> {
    let out = d.denoise(img, sigma)?;
    if !out.same_shape(img) {
        return Err(Error::DenoiserContract {
            name: d.name().to_string(),
            reason: format!(
                "returned {}x{} for a {}x{} input",
                out.width(),
                out.height(),
                img.width(),
                img.height()
            ),
        });
    }
    if let Some(k) = out.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::DenoiserContract {
            name: d.name().to_string(),
            reason: format!("non-finite output at pixel {k}"),
        });
    }
    Ok(out)
}

/// `f(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Denoiser for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn denoise(&self, img: &Plane, _sigma: f64) -> Result<Plane> {
        Ok(img.clone())
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "noise level must be finite and >= 0, got {sigma}"
        )))
    }
}

pub(crate) fn check_plane(img: &Plane) -> Result<()> {
    if img.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(
            "denoiser input contains non-finite values".into(),
        ))
    }
}

/// Empirical bounded-denoiser constant: `||f(x) - x||^2 / (n sigma^2)` on
/// seeded white noise of standard deviation `sigma`, for each `sigma`.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub name: String,
    pub ratios: Vec<(f64, f64)>,
    /// Largest ratio over the tested noise levels.
    pub constant: f64,
}

pub const AUDIT_SIGMAS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

pub fn bounded_denoiser_audit(
    d: &dyn Denoiser,
    sigmas: &[f64],
    size: usize,
    seed: u64,
) -> Result<AuditReport> {
    let mut rng = block_rng(seed, 0);
    let white: Vec<f64> = (0..size * size)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut ratios = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let x = Plane::new(size, size, white.iter().map(|v| s * v).collect())?;
        let fx = checked_denoise(d, &x, s)?;
        ratios.push((s, fx.sq_dist(&x) / (x.len() as f64 * s * s)));
    }
    let constant = ratios.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(AuditReport {
        name: d.name().to_string(),
        ratios,
        constant,
    })
}
