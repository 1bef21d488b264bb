//! Isotropic total-variation denoising by Chambolle's dual projection.

use super::{check_plane, check_sigma, Denoiser};
use crate::error::Result;
use crate::filters::Boundary;
use crate::image::Plane;

pub const DEFAULT_LAMBDA: f64 = 0.7;
const TAU: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvConfig {
    /// The TV weight is `lambda_scale * sigma^2`.
    pub lambda_scale: f64,
    pub max_iters: usize,
    /// Stop once no dual component moves by more than this.
    pub tol: f64,
    pub boundary: Boundary,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            lambda_scale: DEFAULT_LAMBDA,
            max_iters: 200,
            tol: 1e-5,
            boundary: Boundary::Reflect,
        }
    }
}

/// Forward differences. With reflective borders the difference across the
/// last row/column is zero.
fn gradient(u: &[f64], w: usize, h: usize, boundary: Boundary, gx: &mut [f64], gy: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            gx[k] = if x + 1 < w {
                u[k + 1] - u[k]
            } else if boundary == Boundary::Periodic {
                u[y * w] - u[k]
            } else {
                0.0
            };
            gy[k] = if y + 1 < h {
                u[k + w] - u[k]
            } else if boundary == Boundary::Periodic {
                u[x] - u[k]
            } else {
                0.0
            };
        }
    }
}

/// Negative adjoint of [`gradient`].
fn divergence(px: &[f64], py: &[f64], w: usize, h: usize, boundary: Boundary, out: &mut [f64]) {
    let periodic = boundary == Boundary::Periodic;
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let left = if x > 0 {
                px[k - 1]
            } else if periodic {
                px[y * w + w - 1]
            } else {
                0.0
            };
            let up = if y > 0 {
                py[k - w]
            } else if periodic {
                py[(h - 1) * w + x]
            } else {
                0.0
            };
            let own_x = if periodic || x + 1 < w { px[k] } else { 0.0 };
            let own_y = if periodic || y + 1 < h { py[k] } else { 0.0 };
            out[k] = own_x - left + own_y - up;
        }
    }
}

/// `sum_k ||(grad u)_k||`.
pub fn total_variation(img: &Plane, boundary: Boundary) -> f64 {
    let (w, h) = (img.width(), img.height());
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    gradient(img.data(), w, h, boundary, &mut gx, &mut gy);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum()
}

/// Approximates `argmin_x 1/2 ||x - img||^2 + weight TV(x)`.
pub fn tv_prox(img: &Plane, weight: f64, max_iters: usize, tol: f64, boundary: Boundary) -> Plane {
    if weight <= 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let f = img.data();
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    let mut div = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut v = vec![0.0; n];
    let inv = 1.0 / weight;
    for _ in 0..max_iters {
        divergence(&px, &py, w, h, boundary, &mut div);
        for k in 0..n {
            v[k] = div[k] - f[k] * inv;
        }
        gradient(&v, w, h, boundary, &mut gx, &mut gy);
        let mut change: f64 = 0.0;
        for k in 0..n {
            let norm = gx[k].hypot(gy[k]);
            let denom = 1.0 + TAU * norm;
            let nx = (px[k] + TAU * gx[k]) / denom;
            let ny = (py[k] + TAU * gy[k]) / denom;
            change = change.max((nx - px[k]).abs()).max((ny - py[k]).abs());
            px[k] = nx;
            py[k] = ny;
        }
        if change < tol {
            break;
        }
    }
    divergence(&px, &py, w, h, boundary, &mut div);
    let data = f
        .iter()
        .zip(&div)
        .map(|(fk, dk)| fk - weight * dk)
        .collect();
    Plane::new(w, h, data).expect("same shape")
}

/// TV denoising at noise level `sigma`: weight `lambda_scale * sigma^2`.
pub fn tv_denoise(img: &Plane, sigma: f64, cfg: &TvConfig) -> Result<Plane> {
    check_sigma(sigma)?;
    check_plane(img)?;
    Ok(tv_prox(
        img,
        cfg.lambda_scale * sigma * sigma,
        cfg.max_iters,
        cfg.tol,
        cfg.boundary,
    ))
}

#[derive(Debug, Clone, Default)]
pub struct TvDenoiser {
    pub cfg: TvConfig,
}

impl TvDenoiser {
    pub fn new(cfg: TvConfig) -> Self {
        TvDenoiser { cfg }
    }
}

impl Denoiser for TvDenoiser {
    fn name(&self) -> &str {
        "tv"
    }

    fn denoise(&self, img: &Plane, sigma: f64) -> Result<Plane> {
        tv_denoise(img, sigma, &self.cfg)
    }

    fn penalty(&self, img: &Plane) -> Option<f64> {
        Some(self.cfg.lambda_scale * total_variation(img, self.cfg.boundary))
    }
}
