//! Speckle statistics: gamma and complex Wishart models, their log-domain
//! moments, densities and seeded samplers.
//!
//! # Random streams
//!
//! Every sampler draws from ChaCha8 (8-round ChaCha keyed by the 64-bit seed
//! through `SeedableRng::seed_from_u64`) with the 64-bit ChaCha *stream* set to
//! a block index. Images are cut into fixed blocks of [`BLOCK_LEN`] pixels and
//! block `b` always uses stream `b`, so outputs do not depend on how work is
//! scheduled across threads.

pub mod special;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channelizer::ChannelBasis;
use crate::error::{Error, Result};
use crate::hermitian::{eig_hermitian, mat_sqrt, CMat, HermMat, HermStack, C64};
use crate::image::{CovarianceImage, LogChannelImage, Plane};

pub use special::{digamma, polygamma};

/// Pixels per independently seeded random stream.
pub const BLOCK_LEN: usize = 4096;

/// Generator for stream `block` under `seed`.
pub fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

/// Number of looks and matrix dimension of the speckle model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeckleModel {
    looks: f64,
    dim: usize,
}

impl SpeckleModel {
    pub fn new(looks: f64, dim: usize) -> Result<Self> {
        if !(looks > 0.0 && looks.is_finite()) {
            return Err(Error::Domain(format!(
                "number of looks must be positive, got {looks}"
            )));
        }
        if dim == 0 {
            return Err(Error::Domain("matrix dimension must be at least 1".into()));
        }
        Ok(SpeckleModel { looks, dim })
    }

    pub fn looks(&self) -> f64 {
        self.looks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `L < D`: single-look style data whose matrices are rank deficient.
    pub fn rank_deficient(&self) -> bool {
        self.looks < self.dim as f64
    }
}

/// Bias and variance of log-transformed gamma speckle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FTStats {
    /// `E[log I] - log R`.
    pub bias: f64,
    pub variance: f64,
}

fn check_looks(looks: f64) -> Result<()> {
    if looks > 0.0 && looks.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "number of looks must be positive, got {looks}"
        )))
    }
}

/// Fisher-Tippett moments: `bias = psi(L) - log L`, `variance = psi'(L)`.
pub fn ft_stats(looks: f64) -> Result<FTStats> {
    check_looks(looks)?;
    Ok(FTStats {
        bias: digamma(looks)? - looks.ln(),
        variance: polygamma(1, looks)?,
    })
}

/// Mean and variance of `tr log C` for `C ~ W(Sigma; L)` with `log Sigma` given.
pub fn logdet_trace_stats(log_sigma: &HermMat, looks: f64) -> Result<(f64, f64)> {
    let d = log_sigma.dim();
    if looks < d as f64 {
        return Err(Error::Domain(format!(
            "need L >= D, got L = {looks}, D = {d}"
        )));
    }
    let mut mean = log_sigma.trace() - d as f64 * looks.ln();
    let mut var = 0.0;
    for i in 1..=d {
        let arg = looks - i as f64 + 1.0;
        mean += digamma(arg)?;
        var += polygamma(1, arg)?;
    }
    Ok((mean, var))
}

/// Multiplies a reflectivity image by unit-mean gamma speckle of shape `L`.
pub fn sample_gamma_speckle(reflectivity: &Plane, looks: f64, seed: u64) -> Result<Plane> {
    check_looks(looks)?;
    if let Some(k) = reflectivity
        .data()
        .iter()
        .position(|&r| !(r > 0.0 && r.is_finite()))
    {
        return Err(Error::Domain(format!(
            "reflectivity must be positive, got {} at pixel {k}",
            reflectivity.data()[k]
        )));
    }
    let gamma = Gamma::new(looks, 1.0 / looks).map_err(|e| Error::Domain(e.to_string()))?;
    let mut out = reflectivity.data().to_vec();
    out.par_chunks_mut(BLOCK_LEN)
        .enumerate()
        .for_each(|(b, chunk)| {
            let mut rng = block_rng(seed, b as u64);
            for v in chunk.iter_mut() {
                *v *= gamma.sample(&mut rng);
            }
        });
    Plane::new(reflectivity.width(), reflectivity.height(), out)
}

fn complex_normal(rng: &mut impl Rng) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// White Wishart draw `S = (1/L) sum_t g_t g_t*` with circular complex
/// standard normal `g_t`, i.e. `S ~ W(Id; L)`.
pub fn sample_white_wishart(dim: usize, looks: u32, rng: &mut impl Rng) -> Result<HermMat> {
    if looks == 0 || dim == 0 {
        return Err(Error::Domain("need L >= 1 and D >= 1".into()));
    }
    let mut acc = CMat::zeros(dim);
    let mut g = vec![C64::new(0.0, 0.0); dim];
    for _ in 0..looks {
        for v in g.iter_mut() {
            *v = complex_normal(rng);
        }
        for i in 0..dim {
            for j in 0..dim {
                acc[(i, j)] += g[i] * g[j].conj();
            }
        }
    }
    Ok(HermMat::from_dense(&acc.scale(1.0 / looks as f64)))
}

/// `Sigma^{1/2} S Sigma^{1/2}` with the symmetric square root.
pub fn color_wishart(sqrt_sigma: &HermMat, white: &HermMat) -> HermMat {
    let r = sqrt_sigma.to_dense();
    HermMat::from_dense(&r.matmul(&white.to_dense()).matmul(&r))
}

fn check_pd_sigma(sigma: &HermMat) -> Result<()> {
    let e = eig_hermitian(sigma)?;
    if e.values[0] <= 0.0 {
        return Err(Error::Domain(format!(
            "covariance must be positive definite (smallest eigenvalue {:e})",
            e.values[0]
        )));
    }
    Ok(())
}

/// One draw of `C ~ W(Sigma; L)`.
pub fn sample_wishart(sigma: &HermMat, looks: u32, rng: &mut impl Rng) -> Result<HermMat> {
    check_pd_sigma(sigma)?;
    let root = mat_sqrt(sigma)?;
    let s = sample_white_wishart(sigma.dim(), looks, rng)?;
    Ok(color_wishart(&root, &s))
}

/// Wishart speckle over a whole image of underlying covariances.
///
/// Non-integer `looks` are only accepted for `D = 1`, where the gamma sampler is used.
pub fn sample_wishart_image(
    truth: &CovarianceImage,
    looks: f64,
    seed: u64,
) -> Result<CovarianceImage> {
    check_looks(looks)?;
    let d = truth.dim();
    if d == 1 && looks.fract() != 0.0 {
        let speckled = sample_gamma_speckle(&truth.intensity(0), looks, seed)?;
        return Ok(CovarianceImage::from_intensity(&speckled));
    }
    if looks.fract() != 0.0 {
        return Err(Error::Domain(format!(
            "Wishart sampling needs an integer number of looks for D > 1, got {looks}"
        )));
    }
    let l = looks as u32;
    let n = truth.len();
    let blocks: Vec<Vec<HermMat>> = (0..n.div_ceil(BLOCK_LEN))
        .into_par_iter()
        .map(|b| {
            let mut rng = block_rng(seed, b as u64);
            let end = ((b + 1) * BLOCK_LEN).min(n);
            (b * BLOCK_LEN..end)
                .map(|k| sample_wishart(&truth.pixel(k), l, &mut rng).map_err(|e| e.at_pixel(k)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mats: Vec<HermMat> = blocks.into_iter().flatten().collect();
    CovarianceImage::new(
        truth.width(),
        truth.height(),
        HermStack::from_mats(d, &mats),
    )
}

/// `L sum_k tr(Omega(x_k) + e^{Omega(y_k)} e^{-Omega(x_k)})`, constant omitted.
pub fn neg_log_likelihood(
    x: &LogChannelImage,
    y: &LogChannelImage,
    looks: f64,
    basis: &ChannelBasis,
) -> Result<f64> {
    x.check_same_shape(y)?;
    if x.n_channels() != basis.n_channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} channels for a D = {} basis",
            x.n_channels(),
            basis.dim()
        )));
    }
    let terms: Vec<f64> = (0..x.n_pixels())
        .into_par_iter()
        .map(|k| {
            pixel_neg_log_likelihood(&x.pixel(k), &y.pixel(k), basis).map_err(|e| e.at_pixel(k))
        })
        .collect::<Result<_>>()?;
    Ok(looks * terms.iter().sum::<f64>())
}

/// `tr(Omega(x) + e^{Omega(y)} e^{-Omega(x)})` for one pixel.
pub fn pixel_neg_log_likelihood(x: &[f64], y: &[f64], basis: &ChannelBasis) -> Result<f64> {
    let ox = basis.omega(x);
    let ey = crate::hermitian::mat_exp(&basis.omega(y))?;
    let emx = crate::hermitian::mat_exp(&ox.scale(-1.0))?;
    let cross = ey.to_dense().matmul(&emx.to_dense()).trace().re;
    Ok(ox.trace() + cross)
}

/// `ln Gamma_D(L)`, the complex multivariate gamma function.
pub fn ln_complex_multivariate_gamma(dim: usize, looks: f64) -> f64 {
    let d = dim as f64;
    0.5 * d * (d - 1.0) * std::f64::consts::PI.ln()
        + (1..=dim)
            .map(|i| statrs::function::gamma::ln_gamma(looks - i as f64 + 1.0))
            .sum::<f64>()
}

/// Log of the complex Wishart density `p(C | Sigma)` with `L` looks.
pub fn wishart_log_density(c: &HermMat, sigma: &HermMat, looks: f64) -> Result<f64> {
    let d = c.dim();
    if sigma.dim() != d {
        return Err(Error::ShapeMismatch(
            "C and Sigma differ in dimension".into(),
        ));
    }
    if looks < d as f64 {
        return Err(Error::Domain(format!(
            "need L >= D, got L = {looks}, D = {d}"
        )));
    }
    let ec = eig_hermitian(c)?;
    let es = eig_hermitian(sigma)?;
    if ec.values[0] <= 0.0 || es.values[0] <= 0.0 {
        return Err(Error::Domain(
            "C and Sigma must be positive definite".into(),
        ));
    }
    let logdet_c: f64 = ec.values.iter().map(|l| l.ln()).sum();
    let logdet_s: f64 = es.values.iter().map(|l| l.ln()).sum();
    // tr(Sigma^{-1} C) = sum_k e_k* C e_k / lambda_k
    let cd = c.to_dense();
    let mut tr = 0.0;
    for (k, lam) in es.values.iter().enumerate() {
        let mut quad = C64::new(0.0, 0.0);
        for i in 0..d {
            for j in 0..d {
                quad += es.vectors[(i, k)].conj() * cd[(i, j)] * es.vectors[(j, k)];
            }
        }
        tr += quad.re / lam;
    }
    let df = d as f64;
    Ok(looks * df * looks.ln() + (looks - df) * logdet_c
        - ln_complex_multivariate_gamma(d, looks)
        - looks * logdet_s
        - looks * tr)
}

pub fn wishart_density(c: &HermMat, sigma: &HermMat, looks: f64) -> Result<f64> {
    wishart_log_density(c, sigma, looks).map(f64::exp)
}
