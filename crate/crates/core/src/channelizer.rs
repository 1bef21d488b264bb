//! Log-channel decomposition.
//!
//! A log-covariance matrix is parameterised by `D^2` real channels through
//! `Omega(x) = K(A Phi x + b)`, where
//!
//! * `K` lays a real vector onto a Hermitian matrix (diagonal first, then the
//!   upper entries in superdiagonal order, each as `(re + j im) / sqrt 2`), an
//!   isometry for the real inner product `Re tr(M N)`;
//! * `(A, b)` is a PCA whitening of the log-domain coefficients of the image;
//! * `Phi` holds per-channel robust noise standard deviations so that every
//!   channel of `y = Omega^{-1}(log C)` carries unit-variance noise.
//!
//! The module also hosts the input conditioning used before taking logs of
//! rank-deficient (single-look) data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{convolve_separable, gaussian_kernel, median, Boundary};
use crate::hermitian::{
    eig_hermitian, eigenvalue_floor, is_positive_definite, mat_exp_stack, mat_log_stack, HermMat,
    HermStack, C64,
};
use crate::image::{CovarianceImage, LogChannelImage, Plane};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// `1 / Phi^{-1}(3/4)`: MAD to standard deviation for Gaussian samples.
pub const MAD_TO_STD: f64 = 1.4826;

/// Diagonal loading factor applied to pixels that are still not positive definite.
pub const DIAGONAL_LOADING: f64 = 1e-6;

/// Lays `alpha` (length `D^2`) out as a Hermitian matrix.
pub fn kappa(alpha: &[f64]) -> HermMat {
    let d = dim_of(alpha.len());
    let diag = alpha[..d].to_vec();
    let upper = alpha[d..]
        .chunks_exact(2)
        .map(|p| C64::new(p[0], p[1]) / SQRT_2)
        .collect();
    HermMat::from_parts(diag, upper)
}

/// Inverse of [`kappa`].
pub fn kappa_inv(m: &HermMat) -> Vec<f64> {
    let d = m.dim();
    let mut out = Vec::with_capacity(d * d);
    out.extend_from_slice(m.diag());
    for z in m.upper() {
        out.push(z.re * SQRT_2);
        out.push(z.im * SQRT_2);
    }
    out
}

fn dim_of(n_channels: usize) -> usize {
    let d = (n_channels as f64).sqrt().round() as usize;
    assert!(
        d >= 1 && d * d == n_channels,
        "{n_channels} is not a perfect square"
    );
    d
}

/// Calibrated affine map between log-covariance matrices and channel vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBasis {
    dim: usize,
    /// `D^2 x D^2` orthogonal matrix, row-major, eigenvectors as columns.
    a: Vec<f64>,
    b: Vec<f64>,
    phi: Vec<f64>,
}

impl ChannelBasis {
    pub fn new(dim: usize, a: Vec<f64>, b: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        let n = dim * dim;
        if dim == 0 || a.len() != n * n || b.len() != n || phi.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "basis for D = {dim} needs A {n}x{n}, b and Phi of length {n}"
            )));
        }
        if phi.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidInput("Phi entries must be positive".into()));
        }
        let basis = ChannelBasis { dim, a, b, phi };
        let err = basis.orthogonality_error();
        if err > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "A is not orthogonal (max |A^T A - I| = {err:e})"
            )));
        }
        Ok(basis)
    }

    /// `A = Id`, `b = 0`, `Phi = 1`: `Omega` reduces to `K`.
    pub fn identity(dim: usize) -> Self {
        let n = dim * dim;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        ChannelBasis {
            dim,
            a,
            b: vec![0.0; n],
            phi: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_channels(&self) -> usize {
        self.dim * self.dim
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn orthogonality_error(&self) -> f64 {
        let n = self.n_channels();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| self.a[k * n + i] * self.a[k * n + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// `A Phi x`.
    fn linear(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n_channels();
        (0..n)
            .map(|r| (0..n).map(|c| self.a[r * n + c] * self.phi[c] * x[c]).sum())
            .collect()
    }

    /// `Phi A^T v`.
    fn linear_adjoint(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n_channels();
        (0..n)
            .map(|c| self.phi[c] * (0..n).map(|r| self.a[r * n + c] * v[r]).sum::<f64>())
            .collect()
    }

    /// `Omega(x) = K(A Phi x + b)`.
    pub fn omega(&self, x: &[f64]) -> HermMat {
        let mut v = self.linear(x);
        for (vi, bi) in v.iter_mut().zip(&self.b) {
            *vi += bi;
        }
        kappa(&v)
    }

    /// Linear part of `Omega`: `K(A Phi x)`.
    pub fn omega_linear(&self, x: &[f64]) -> HermMat {
        kappa(&self.linear(x))
    }

    /// `Omega^{-1}(M) = Phi^{-1} A^T (K^{-1}(M) - b)`.
    pub fn omega_inv(&self, m: &HermMat) -> Vec<f64> {
        let n = self.n_channels();
        let alpha = kappa_inv(m);
        let centered: Vec<f64> = alpha.iter().zip(&self.b).map(|(a, b)| a - b).collect();
        (0..n)
            .map(|c| (0..n).map(|r| self.a[r * n + c] * centered[r]).sum::<f64>() / self.phi[c])
            .collect()
    }

    /// Adjoint of the linear part: `Phi A^T K^{-1}(M)`.
    pub fn omega_adjoint(&self, m: &HermMat) -> Vec<f64> {
        self.linear_adjoint(&kappa_inv(m))
    }

    /// Channel image `y = Omega^{-1}(log C)` from an image of log-matrices.
    pub fn decompose(
        &self,
        width: usize,
        height: usize,
        logs: &HermStack,
    ) -> Result<LogChannelImage> {
        if logs.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "D = {} stack for a D = {} basis",
                logs.dim(),
                self.dim
            )));
        }
        let pixels: Vec<Vec<f64>> = (0..logs.len())
            .into_par_iter()
            .map(|k| self.omega_inv(&logs.get(k)))
            .collect();
        LogChannelImage::from_pixels(width, height, &pixels)
    }

    /// Image of `Omega(x_k)`.
    pub fn compose(&self, x: &LogChannelImage) -> Result<HermStack> {
        if x.n_channels() != self.n_channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} channels for a D = {} basis",
                x.n_channels(),
                self.dim
            )));
        }
        let mats: Vec<HermMat> = (0..x.n_pixels())
            .into_par_iter()
            .map(|k| self.omega(&x.pixel(k)))
            .collect();
        Ok(HermStack::from_mats(self.dim, &mats))
    }

    /// Covariance image `exp(Omega(x_k))`.
    pub fn to_covariance(&self, x: &LogChannelImage) -> Result<CovarianceImage> {
        let logs = self.compose(x)?;
        CovarianceImage::new(x.width(), x.height(), mat_exp_stack(&logs)?)
    }
}

/// Robust noise standard deviation: `1.4826 median |w|` over the horizontal
/// pseudo-residuals `w = (x[i+1] - x[i]) / sqrt 2` (vertical ones for single-column images).
pub fn mad_sigma(channel: &Plane) -> Result<f64> {
    if channel.len() < 16 {
        return Err(Error::InvalidInput(format!(
            "noise estimation needs at least 16 pixels, got {}",
            channel.len()
        )));
    }
    let (w, h) = (channel.width(), channel.height());
    let mut res = Vec::with_capacity(channel.len());
    if w >= 2 {
        for y in 0..h {
            for x in 0..w - 1 {
                res.push(((channel.at(x + 1, y) - channel.at(x, y)) / SQRT_2).abs());
            }
        }
    } else {
        for y in 0..h - 1 {
            res.push(((channel.at(0, y + 1) - channel.at(0, y)) / SQRT_2).abs());
        }
    }
    Ok(MAD_TO_STD * median(&res))
}

/// Estimates `(A, b, Phi)` from a positive definite covariance image.
pub fn calibrate(c: &CovarianceImage, looks: f64) -> Result<ChannelBasis> {
    if !(looks > 0.0) {
        return Err(Error::Domain(format!(
            "number of looks must be positive, got {looks}"
        )));
    }
    let logs = mat_log_stack(c.stack())?;
    calibrate_logs(c.width(), c.height(), &logs)
}

/// Calibration from precomputed log-matrices.
pub fn calibrate_logs(width: usize, height: usize, logs: &HermStack) -> Result<ChannelBasis> {
    let d = logs.dim();
    let nc = d * d;
    let n = logs.len();
    if n < nc + 1 {
        return Err(Error::DegenerateCalibration(format!(
            "{n} pixels cannot calibrate {nc} channels"
        )));
    }
    let alphas: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| kappa_inv(&logs.get(k)))
        .collect();

    // sequential sums keep the result independent of the thread count
    let mut b = vec![0.0; nc];
    for a in &alphas {
        for (bi, ai) in b.iter_mut().zip(a) {
            *bi += ai;
        }
    }
    for bi in b.iter_mut() {
        *bi /= n as f64;
    }
    let mut cov = vec![0.0; nc * nc];
    for a in &alphas {
        for i in 0..nc {
            let di = a[i] - b[i];
            for j in i..nc {
                cov[i * nc + j] += di * (a[j] - b[j]);
            }
        }
    }
    for i in 0..nc {
        for j in i..nc {
            cov[i * nc + j] /= n as f64;
            cov[j * nc + i] = cov[i * nc + j];
        }
    }

    let a = pca_basis(&cov, nc)?;
    let mut basis = ChannelBasis {
        dim: d,
        a,
        b,
        phi: vec![1.0; nc],
    };

    let y = basis.decompose(width, height, logs)?;
    let mut phi = Vec::with_capacity(nc);
    for i in 0..nc {
        let s = mad_sigma(&y.channel_plane(i))?;
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateCalibration(format!(
                "channel {i} has zero estimated noise; condition the input or use more data"
            )));
        }
        phi.push(s);
    }
    basis.phi = phi;
    Ok(basis)
}

/// Eigenvectors of a symmetric PSD matrix, descending eigenvalue order, each
/// with its largest-magnitude component positive.
fn pca_basis(cov: &[f64], n: usize) -> Result<Vec<f64>> {
    let upper = crate::hermitian::upper_pairs(n)
        .map(|(i, j)| C64::new(cov[i * n + j], 0.0))
        .collect();
    let diag = (0..n).map(|i| cov[i * n + i]).collect();
    let m = HermMat::from_parts(diag, upper);
    let eig = eig_hermitian(&m)?;
    let top = *eig.values.last().unwrap();
    let bottom = eig.values[0];
    if !(top > 0.0) || bottom <= 1e-12 * top {
        return Err(Error::DegenerateCalibration(format!(
            "log-channel covariance is rank deficient (eigenvalues {bottom:e} .. {top:e}); \
             condition the input or use more data"
        )));
    }
    let mut a = vec![0.0; n * n];
    for (col, src) in (0..n).rev().enumerate() {
        let v: Vec<f64> = (0..n).map(|r| eig.vectors[(r, src)].re).collect();
        // Jacobi on a real matrix keeps vectors real; renormalise against rounding
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| {
            if x.abs() > acc.abs() * (1.0 + 1e-12) {
                x
            } else {
                acc
            }
        });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            a[r * n + col] = sign * v[r] / norm;
        }
    }
    Ok(a)
}

/// Makes every pixel log-transformable.
///
/// With `L < D` the off-diagonal entries are shrunk by the local coherence
/// computed with a unit-bandwidth Gaussian window (radius 3, reflective
/// borders). Any pixel that is still not positive definite then receives a
/// diagonal loading `delta tr(C)/D Id`, starting at `delta = 1e-6` and growing
/// tenfold until it is. Already positive definite multi-look input is
/// returned unchanged.
pub fn condition_input(c: &CovarianceImage, looks: f64) -> Result<CovarianceImage> {
    let d = c.dim();
    let planes = c.stack().planes();
    for i in 0..d {
        if let Some(k) = planes[i].iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidData {
                pixel: k,
                reason: format!("diagonal entry {i} is {} (must be positive)", planes[i][k]),
            });
        }
    }
    if let Some(k) = planes
        .iter()
        .find_map(|p| p.iter().position(|v| !v.is_finite()))
    {
        return Err(Error::InvalidData {
            pixel: k,
            reason: "non-finite entry".into(),
        });
    }

    let rank_deficient = looks < d as f64;
    let mut out = c.clone();
    if rank_deficient && d > 1 {
        let kernel = gaussian_kernel(1.0, 3);
        let smooth: Vec<Plane> = (0..d * d)
            .into_par_iter()
            .map(|i| convolve_separable(&c.plane(i), &kernel, Boundary::Reflect))
            .collect();
        let stack = out.stack_mut();
        let n = stack.len();
        let planes = stack.planes_mut();
        for (u, (i, j)) in crate::hermitian::upper_pairs(d).enumerate() {
            let (re, im) = (d + 2 * u, d + 2 * u + 1);
            for k in 0..n {
                let num = C64::new(smooth[re].data()[k], smooth[im].data()[k]).norm();
                let den = (smooth[i].data()[k] * smooth[j].data()[k]).sqrt();
                let ratio = num / den;
                planes[re][k] *= ratio;
                planes[im][k] *= ratio;
            }
        }
    }

    let fixes: Vec<(usize, HermMat)> = (0..out.len())
        .into_par_iter()
        .filter_map(|k| {
            let m = out.pixel(k);
            if is_positive_definite(&m) {
                None
            } else {
                Some((k, load_diagonal(&m)))
            }
        })
        .collect();
    if !rank_deficient && fixes.is_empty() {
        return Ok(c.clone());
    }
    for (k, m) in fixes {
        out.stack_mut().set(k, &m);
    }
    Ok(out)
}

fn load_diagonal(m: &HermMat) -> HermMat {
    let d = m.dim();
    let level = m.trace() / d as f64;
    let mut delta = DIAGONAL_LOADING;
    loop {
        let loaded = m.add(&HermMat::identity(d).scale(delta * level));
        if is_positive_definite(&loaded) || delta >= 1.0 {
            return loaded;
        }
        delta *= 10.0;
    }
}

/// Smallest eigenvalue over the image relative to the log-transform floor.
pub fn min_pd_margin(c: &CovarianceImage) -> f64 {
    (0..c.len())
        .into_par_iter()
        .map(|k| {
            let m = c.pixel(k);
            let e = eig_hermitian(&m).map(|e| e.values[0]).unwrap_or(f64::NAN);
            e - eigenvalue_floor(&m)
        })
        .reduce(|| f64::INFINITY, f64::min)
}
