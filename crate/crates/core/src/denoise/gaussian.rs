//! Gaussian smoothing baseline.

use super::{check_plane, check_sigma, Denoiser};
use crate::error::Result;
use crate::filters::{convolve_separable, gaussian_kernel, Boundary};
use crate::image::Plane;

pub const MAX_SPATIAL_STD: f64 = 3.0;

/// Convolution with a Gaussian of spatial standard deviation `min(sigma, 3)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianSmoothing {
    pub boundary: Boundary,
}

impl GaussianSmoothing {
    pub fn kernel(sigma: f64) -> Vec<f64> {
        let std = sigma.min(MAX_SPATIAL_STD);
        let radius = (3.0 * std).ceil().max(1.0) as usize;
        gaussian_kernel(std, radius)
    }
}

pub fn gaussian_smooth(img: &Plane, sigma: f64, boundary: Boundary) -> Result<Plane> {
    check_sigma(sigma)?;
    check_plane(img)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    Ok(convolve_separable(
        img,
        &GaussianSmoothing::kernel(sigma),
        boundary,
    ))
}

impl Denoiser for GaussianSmoothing {
    fn name(&self) -> &str {
        "gauss"
    }

    fn denoise(&self, img: &Plane, sigma: f64) -> Result<Plane> {
        gaussian_smooth(img, sigma, self.boundary)
    }
}
