//! Accuracy of the rectangle-rule Newton step as the matrix size grows.
//!
//! For each trial a random covariance `Sigma` is drawn, a Wishart sample `C`
//! with `L = D` looks is taken, and 10 quasi-Newton updates are run with
//! `beta = 10 L`, `y = log C` and anchor `a = log Sigma` (identity channel
//! basis). The reported error is `||Delta_100(x)|| / ||x||` at the result.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::channelizer::ChannelBasis;
use crate::error::{Error, Result};
use crate::fidelity::{FidelityProblem, DEFAULT_INNER_ITERS};
use crate::hermitian::{mat_exp, mat_log, HermMat, C64};
use crate::statistics::{block_rng, sample_wishart};

pub const FIG4_DIMS: [usize; 4] = [2, 4, 8, 16];
pub const FIG4_QS: [usize; 6] = [0, 1, 2, 4, 8, 16];
/// Half-width of the spectrum of `log Sigma`.
const LOG_SPREAD: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct Fig4Config {
    pub dims: Vec<usize>,
    pub qs: Vec<usize>,
    pub trials: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for Fig4Config {
    fn default() -> Self {
        Fig4Config {
            dims: FIG4_DIMS.to_vec(),
            qs: FIG4_QS.to_vec(),
            trials: 100,
            iters: DEFAULT_INNER_ITERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fig4Row {
    pub dim: usize,
    pub q: usize,
    pub trials: usize,
    pub mean_residual: f64,
    pub max_residual: f64,
}

/// `exp(H)` for a Gaussian unitary ensemble draw `H` scaled so that its
/// spectrum fills roughly `[-1.5, 1.5]`.
pub fn random_covariance(dim: usize, rng: &mut impl Rng) -> Result<HermMat> {
    let scale = LOG_SPREAD / (2.0 * (dim as f64).sqrt());
    let mut h = HermMat::zeros(dim);
    for i in 0..dim {
        let g: f64 = StandardNormal.sample(rng);
        h.diag_mut()[i] = scale * g;
        for j in i + 1..dim {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            h.set(
                i,
                j,
                C64::new(re, im) * (scale * std::f64::consts::FRAC_1_SQRT_2),
            );
        }
    }
    mat_exp(&h)
}

fn trial(dim: usize, qs: &[usize], iters: usize, seed: u64, index: usize) -> Result<Vec<f64>> {
    let mut rng = block_rng(seed, ((dim as u64) << 32) | index as u64);
    let sigma = random_covariance(dim, &mut rng)?;
    let looks = dim as u32;
    let c = sample_wishart(&sigma, looks, &mut rng)?;
    let basis = ChannelBasis::identity(dim);
    let y = basis.omega_inv(&mat_log(&c)?);
    let a = basis.omega_inv(&mat_log(&sigma)?);
    let looks = looks as f64;
    qs.iter()
        .map(|&q| {
            let p = FidelityProblem::new(&y, &a, 10.0 * looks, looks, q, &basis)?.prepare()?;
            let x = p.solve_from(&y, iters, 1.0)?;
            p.residual(&x)
        })
        .collect()
}

/// Mean and worst residual per `(D, Q)`, rows ordered by `D` then `Q`.
pub fn fig4(cfg: &Fig4Config) -> Result<Vec<Fig4Row>> {
    if cfg.trials == 0 || cfg.iters == 0 {
        return Err(Error::InvalidInput(
            "trials and iterations must be positive".into(),
        ));
    }
    if let Some(d) = cfg.dims.iter().find(|&&d| d == 0 || d > 64) {
        return Err(Error::InvalidInput(format!("dimension {d} outside 1..=64")));
    }
    let mut rows = Vec::new();
    for &dim in &cfg.dims {
        let per_trial: Vec<Vec<f64>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| trial(dim, &cfg.qs, cfg.iters, cfg.seed, t))
            .collect::<Result<_>>()?;
        for (col, &q) in cfg.qs.iter().enumerate() {
            let values: Vec<f64> = per_trial.iter().map(|r| r[col]).collect();
            rows.push(Fig4Row {
                dim,
                q,
                trials: cfg.trials,
                mean_residual: values.iter().sum::<f64>() / values.len() as f64,
                max_residual: values.iter().copied().fold(0.0, f64::max),
            });
        }
    }
    Ok(rows)
}

/// Plain-text table: one line per `D`, one column per `Q`.
pub fn format_fig4(rows: &[Fig4Row]) -> String {
    let mut qs: Vec<usize> = rows.iter().map(|r| r.q).collect();
    qs.sort_unstable();
    qs.dedup();
    let mut dims: Vec<usize> = rows.iter().map(|r| r.dim).collect();
    dims.dedup();
    let mut out = format!("{:>4}", "D");
    for q in &qs {
        out += &format!(" {:>11}", format!("Q={q}"));
    }
    out.push('\n');
    for d in dims {
        out += &format!("{d:>4}");
        for q in &qs {
            match rows.iter().find(|r| r.dim == d && r.q == *q) {
                Some(r) => out += &format!(" {:>11.3e}", r.mean_residual),
                None => out += &format!(" {:>11}", "-"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermitian::{eig_hermitian, is_positive_definite};

    #[test]
    fn random_covariances_are_spread_but_bounded() {
        let mut rng = block_rng(1, 0);
        for d in [2, 4, 8, 16] {
            let s = random_covariance(d, &mut rng).unwrap();
            assert!(is_positive_definite(&s));
            let e = eig_hermitian(&s).unwrap();
            let ratio = e.values[d - 1] / e.values[0];
            assert!(ratio > 1.5 && ratio < 1e3, "D={d}: {ratio}");
        }
    }

    #[test]
    fn small_run_is_deterministic_and_refines() {
        let cfg = Fig4Config {
            dims: vec![2, 3],
            qs: vec![1, 4, 16],
            trials: 8,
            ..Fig4Config::default()
        };
        let a = fig4(&cfg).unwrap();
        let b = fig4(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for d in [2, 3] {
            let r: Vec<f64> = a
                .iter()
                .filter(|r| r.dim == d)
                .map(|r| r.mean_residual)
                .collect();
            assert!(r[2] <= r[0], "{r:?}");
        }
        let table = format_fig4(&a);
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("Q=16"));
    }

    #[test]
    fn rejects_empty_runs() {
        let cfg = Fig4Config {
            trials: 0,
            ..Fig4Config::default()
        };
        assert!(fig4(&cfg).is_err());
    }
}
