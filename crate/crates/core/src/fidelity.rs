//! Per-pixel data-fidelity proximal step.
//!
//! Each pixel solves
//! `min_x beta/2 ||x - a||^2 + L tr(Omega(x) + e^{Omega(y)} e^{-Omega(x)})`
//! with a fixed number of (quasi-)Newton updates. For `D = 1` this is an exact
//! scalar Newton iteration. For `D > 1` the gradient involves
//! `J = int_0^1 e^{(u-1)X} e^{Y} e^{-uX} du` (`X = Omega(x)`, `Y = Omega(y)`),
//! approximated with `Q` midpoint rectangles, and the Hessian is replaced by
//! the diagonal `beta + L |Omega*(J)|`.

use rayon::prelude::*;

use crate::channelizer::ChannelBasis;
use crate::error::{Error, Result};
use crate::hermitian::{eig_hermitian, eigenbasis_hadamard, mat_exp, midpoints, HermMat, EXP_MAX};
use crate::image::LogChannelImage;

pub const DEFAULT_INNER_ITERS: usize = 10;
pub const DEFAULT_Q: usize = 1;
/// Rectangle count used as the reference integral in diagnostics.
pub const REFERENCE_Q: usize = 100;
/// Denominator entries are clamped to at least `DENOMINATOR_FLOOR * beta`.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{name} must be finite, got {v}"
        )))
    }
}

fn check_scalar_args(y: f64, a: f64, beta: f64, looks: f64, phi: f64) -> Result<()> {
    check_finite("y", y)?;
    check_finite("a", a)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if !(looks > 0.0 && looks.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "looks must be positive, got {looks}"
        )));
    }
    if !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "scale must be positive, got {phi}"
        )));
    }
    Ok(())
}

/// Scalar Newton iteration started at `x = y`.
pub fn newton_scalar(y: f64, a: f64, beta: f64, looks: f64, iters: usize) -> Result<f64> {
    newton_scalar_scaled(y, a, beta, looks, 1.0, iters)
}

/// Scalar iteration for `Omega(x) = phi x + b`, the single-channel case of
/// the matrix update:
/// `x <- x - [beta (x - a) + L phi (1 - e^{phi (y - x)})] / [beta + L phi e^{phi (y - x)}]`.
pub fn newton_scalar_scaled(
    y: f64,
    a: f64,
    beta: f64,
    looks: f64,
    phi: f64,
    iters: usize,
) -> Result<f64> {
    newton_scalar_from(y, y, a, beta, looks, phi, iters, 1.0)
}

#[allow(clippy::too_many_arguments)]
pub fn newton_scalar_from(
    x0: f64,
    y: f64,
    a: f64,
    beta: f64,
    looks: f64,
    phi: f64,
    iters: usize,
    damping: f64,
) -> Result<f64> {
    check_scalar_args(y, a, beta, looks, phi)?;
    check_finite("x0", x0)?;
    if iters == 0 {
        return Err(Error::InvalidInput(
            "at least one Newton iteration is required".into(),
        ));
    }
    let mut x = x0;
    for _ in 0..iters {
        let e = (phi * (y - x)).exp();
        let num = beta * (x - a) + looks * phi * (1.0 - e);
        let den = (beta + looks * phi * e).max(DENOMINATOR_FLOOR * beta);
        x -= damping * num / den;
        if !x.is_finite() {
            return Err(Error::Overflow {
                max_eig: phi * (y - x),
                limit: EXP_MAX,
            });
        }
    }
    Ok(x)
}

/// One pixel of the fidelity step.
#[derive(Debug, Clone, Copy)]
pub struct FidelityProblem<'a> {
    pub y: &'a [f64],
    pub a: &'a [f64],
    pub beta: f64,
    pub looks: f64,
    /// Number of rectangles; `0` uses the commuting surrogate `e^{Omega(y) - Omega(x)}`.
    pub q: usize,
    pub basis: &'a ChannelBasis,
}

impl<'a> FidelityProblem<'a> {
    pub fn new(
        y: &'a [f64],
        a: &'a [f64],
        beta: f64,
        looks: f64,
        q: usize,
        basis: &'a ChannelBasis,
    ) -> Result<Self> {
        let n = basis.n_channels();
        if y.len() != n || a.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "y and a need {n} channels, got {} and {}",
                y.len(),
                a.len()
            )));
        }
        check_scalar_args(0.0, 0.0, beta, looks, 1.0)?;
        for v in y.iter().chain(a) {
            check_finite("channel value", *v)?;
        }
        Ok(FidelityProblem {
            y,
            a,
            beta,
            looks,
            q,
            basis,
        })
    }

    pub fn with_q(self, q: usize) -> Self {
        FidelityProblem { q, ..self }
    }

    /// `beta/2 ||x - a||^2 + L tr(Omega(x) + e^{Omega(y)} e^{-Omega(x)})`.
    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        let quad: f64 = x
            .iter()
            .zip(self.a)
            .map(|(xi, ai)| (xi - ai) * (xi - ai))
            .sum();
        let nll = crate::statistics::pixel_neg_log_likelihood(x, self.y, self.basis)?;
        Ok(0.5 * self.beta * quad + self.looks * nll)
    }

    /// Precomputes `e^{Omega(y)}` for repeated evaluations.
    pub fn prepare(&self) -> Result<Prepared<'a>> {
        let ey = mat_exp(&self.basis.omega(self.y))?;
        Ok(Prepared { p: *self, ey })
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.prepare()?.gradient(x)
    }

    pub fn hessian_diag(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.prepare()?.hessian_diag(x)
    }

    /// Quasi-Newton step `Delta_Q` at `x`.
    pub fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.prepare()?.step(x)
    }
}

/// A problem together with `e^{Omega(y)}`.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    p: FidelityProblem<'a>,
    ey: HermMat,
}

impl Prepared<'_> {
    pub fn problem(&self) -> &FidelityProblem<'_> {
        &self.p
    }

    /// Approximation of `J` at `x` with the problem's `Q`.
    pub fn integral(&self, x: &[f64]) -> Result<HermMat> {
        let basis = self.p.basis;
        if self.p.q == 0 {
            let diff: Vec<f64> = self.p.y.iter().zip(x).map(|(y, x)| y - x).collect();
            return mat_exp(&basis.omega_linear(&diff));
        }
        rectangle_integral(&basis.omega(x), &self.ey, self.p.q)
    }

    /// Gradient `beta (x - a) + L Omega*(Id - J)` and Hessian diagonal
    /// `beta + L |Omega*(J)|` sharing one evaluation of `J`.
    fn gradient_and_curvature(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let basis = self.p.basis;
        let j = self.integral(x)?;
        let id = HermMat::identity(basis.dim());
        let adj_id = basis.omega_adjoint(&id);
        let adj_j = basis.omega_adjoint(&j);
        let (beta, looks) = (self.p.beta, self.p.looks);
        let grad = (0..x.len())
            .map(|i| beta * (x[i] - self.p.a[i]) + looks * (adj_id[i] - adj_j[i]))
            .collect();
        let curv = adj_j
            .iter()
            .map(|v| (beta + looks * v.abs()).max(DENOMINATOR_FLOOR * beta))
            .collect();
        Ok((grad, curv))
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.gradient_and_curvature(x)?.0)
    }

    pub fn hessian_diag(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.gradient_and_curvature(x)?.1)
    }

    pub fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (g, h) = self.gradient_and_curvature(x)?;
        Ok(g.iter().zip(&h).map(|(g, h)| g / h).collect())
    }

    /// Runs `iters` updates `x <- x - damping Delta_Q` from `x0`.
    pub fn solve_from(&self, x0: &[f64], iters: usize, damping: f64) -> Result<Vec<f64>> {
        if iters == 0 {
            return Err(Error::InvalidInput(
                "at least one Newton iteration is required".into(),
            ));
        }
        let mut x = x0.to_vec();
        for _ in 0..iters {
            let s = self.step(&x)?;
            for (xi, si) in x.iter_mut().zip(&s) {
                *xi -= damping * si;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Overflow {
                    max_eig: f64::INFINITY,
                    limit: EXP_MAX,
                });
            }
        }
        Ok(x)
    }

    /// `||Delta_100(x)|| / ||x||`: distance of `x` from the stationary point
    /// as seen through an accurate integral.
    pub fn residual(&self, x: &[f64]) -> Result<f64> {
        let reference = Prepared {
            p: self.p.with_q(REFERENCE_Q),
            ey: self.ey.clone(),
        };
        let s = reference.step(x)?;
        let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(ns / nx)
    }
}

/// `(1/Q) sum_q e^{(u_q - 1) X} EY e^{-u_q X}`, evaluated in the eigenbasis of `X`.
///
/// With `X = E Lambda E*` and `M = E* EY E`, entry `(i, j)` of the integrand in
/// that basis is `M_ij e^{(u - 1) l_i - u l_j}`. Midpoints are symmetric about
/// `1/2`, so the weights are symmetric and the result is Hermitian.
pub fn rectangle_integral(x: &HermMat, ey: &HermMat, q: usize) -> Result<HermMat> {
    if q == 0 {
        return Err(Error::InvalidInput("need at least one rectangle".into()));
    }
    let eig = eig_hermitian(x)?;
    let lam = &eig.values;
    let spread = lam.last().unwrap() - lam[0];
    let worst = lam[0].abs().max(lam.last().unwrap().abs()) + spread;
    if worst > EXP_MAX {
        return Err(Error::Overflow {
            max_eig: worst,
            limit: EXP_MAX,
        });
    }
    let us: Vec<f64> = midpoints(q).collect();
    let n = lam.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = us
                .iter()
                .map(|u| ((u - 1.0) * lam[i] - u * lam[j]).exp())
                .sum::<f64>()
                / q as f64;
            w[i * n + j] = s;
            w[j * n + i] = s;
        }
    }
    Ok(eigenbasis_hadamard(&eig.vectors, &ey.to_dense(), |i, j| {
        w[i * n + j]
    }))
}

/// Exact `J` from the divided differences of `e^{-t}` on the spectrum of `X`:
/// `W_ij = (e^{-l_j} - e^{-l_i}) / (l_i - l_j)`, `e^{-l_i}` on ties.
pub fn exact_integral(x: &HermMat, ey: &HermMat) -> Result<HermMat> {
    let eig = eig_hermitian(x)?;
    let lam = &eig.values;
    let worst = lam[0].abs().max(lam.last().unwrap().abs());
    if worst > EXP_MAX {
        return Err(Error::Overflow {
            max_eig: worst,
            limit: EXP_MAX,
        });
    }
    let w = |i: usize, j: usize| {
        let delta = lam[i] - lam[j];
        if delta.abs() < 1e-12 * (1.0 + lam[i].abs()) {
            (-lam[i]).exp()
        } else {
            (-lam[i]).exp() * delta.exp_m1() / delta
        }
    };
    Ok(eigenbasis_hadamard(&eig.vectors, &ey.to_dense(), w))
}

/// Matrix iteration from `x = y` with `iters` undamped updates.
pub fn newton_matrix(p: &FidelityProblem, iters: usize) -> Result<Vec<f64>> {
    p.prepare()?.solve_from(p.y, iters, 1.0)
}

pub fn nll_gradient(x: &[f64], p: &FidelityProblem) -> Result<Vec<f64>> {
    p.gradient(x)
}

pub fn hessian_diag_approx(x: &[f64], p: &FidelityProblem) -> Result<Vec<f64>> {
    p.hessian_diag(x)
}

/// Inner-solver settings shared by every pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub iters: usize,
    pub q: usize,
    /// Multiplies every step; `1` is the plain update.
    pub damping: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            iters: DEFAULT_INNER_ITERS,
            q: DEFAULT_Q,
            damping: 1.0,
        }
    }
}

impl NewtonOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::InvalidInput(
                "inner iterations must be at least 1".into(),
            ));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// Solves every pixel independently. `x0` selects the starting point (`y` when `None`).
pub fn solve_image(
    y: &LogChannelImage,
    a: &LogChannelImage,
    x0: Option<&LogChannelImage>,
    beta: f64,
    looks: f64,
    basis: &ChannelBasis,
    opts: &NewtonOptions,
) -> Result<LogChannelImage> {
    opts.validate()?;
    y.check_same_shape(a)?;
    if let Some(x0) = x0 {
        y.check_same_shape(x0)?;
    }
    let start = x0.unwrap_or(y);
    let n = y.n_pixels();
    let pixels: Vec<Vec<f64>> = if basis.n_channels() == 1 && basis.a()[0] > 0.0 {
        let phi = basis.phi()[0] * basis.a()[0];
        let (yc, ac, sc) = (&y.channels()[0], &a.channels()[0], &start.channels()[0]);
        (0..n)
            .into_par_iter()
            .map(|k| {
                newton_scalar_from(
                    sc[k],
                    yc[k],
                    ac[k],
                    beta,
                    looks,
                    phi,
                    opts.iters,
                    opts.damping,
                )
                .map(|v| vec![v])
                .map_err(|e| e.at_pixel(k))
            })
            .collect::<Result<_>>()?
    } else {
        (0..n)
            .into_par_iter()
            .map(|k| {
                let (yk, ak, sk) = (y.pixel(k), a.pixel(k), start.pixel(k));
                FidelityProblem::new(&yk, &ak, beta, looks, opts.q, basis)
                    .and_then(|p| p.prepare()?.solve_from(&sk, opts.iters, opts.damping))
                    .map_err(|e| e.at_pixel(k))
            })
            .collect::<Result<_>>()?
    };
    LogChannelImage::from_pixels(y.width(), y.height(), &pixels)
}
