//! Image quality against a speckle-free reference.
//!
//! Both metrics anchor their dynamic range to the reference: the PSNR peak
//! and the SSIM range are the 99th percentile of the reference values.

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::filters::{gaussian_kernel, mad_std, quantile};
use crate::image::{CovarianceImage, Plane};

pub const PEAK_QUANTILE: f64 = 0.99;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_STD: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn peak_value(reference: &Plane) -> f64 {
    quantile(reference.data(), PEAK_QUANTILE)
}

/// `10 log10(peak^2 / MSE)`; `+inf` when the images are identical.
pub fn psnr_q99(est: &Plane, reference: &Plane) -> Result<f64> {
    est.check_same_shape(reference)?;
    if reference.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput(
            "PSNR reference must be nonnegative".into(),
        ));
    }
    let mse = est.sq_dist(reference) / est.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = peak_value(reference);
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Gaussian-weighted window sums over every fully contained 11x11 window.
fn window_means(img: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * img[y * w + x + t])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[(y + t) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean single-scale SSIM over all valid 11x11 Gaussian windows.
pub fn ssim(est: &Plane, reference: &Plane) -> Result<f64> {
    est.check_same_shape(reference)?;
    let (w, h) = (est.width(), est.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    if est == reference {
        return Ok(1.0);
    }
    let range = peak_value(reference);
    if range <= 0.0 {
        return Err(Error::InvalidInput(
            "SSIM reference has no dynamic range".into(),
        ));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let kernel = gaussian_kernel(SSIM_STD, SSIM_WINDOW / 2);
    let (a, b) = (est.data(), reference.data());
    let products = [
        a.to_vec(),
        b.to_vec(),
        a.iter().map(|v| v * v).collect(),
        b.iter().map(|v| v * v).collect(),
        a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>(),
    ];
    let m: Vec<Vec<f64>> = products
        .par_iter()
        .map(|p| window_means(p, w, h, &kernel))
        .collect();
    let ow = w + 1 - SSIM_WINDOW;
    let rows: Vec<f64> = m[0]
        .par_chunks(ow)
        .enumerate()
        .map(|(r, row)| {
            row.iter()
                .enumerate()
                .map(|(c, &mu_a)| {
                    let k = r * ow + c;
                    let mu_b = m[1][k];
                    let var_a = m[2][k] - mu_a * mu_a;
                    let var_b = m[3][k] - mu_b * mu_b;
                    let cov = m[4][k] - mu_a * mu_b;
                    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
                })
                .sum()
        })
        .collect();
    Ok(rows.iter().sum::<f64>() / m[0].len() as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityReport {
    #[serde(serialize_with = "serialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub peak_value: f64,
    /// Robust standard deviation of `est - ref`.
    pub residual_mad: f64,
}

impl QualityReport {
    pub fn compare(est: &Plane, reference: &Plane) -> Result<Self> {
        let psnr_db = psnr_q99(est, reference)?;
        let ssim = ssim(est, reference)?;
        let diff: Vec<f64> = est
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(QualityReport {
            psnr_db,
            ssim,
            peak_value: peak_value(reference),
            residual_mad: mad_std(&diff),
        })
    }
}

/// The plane metrics are computed on: amplitude for one channel, trace otherwise.
pub fn display_plane(c: &CovarianceImage) -> Plane {
    if c.dim() == 1 {
        c.intensity(0).map(|v| v.max(0.0).sqrt())
    } else {
        c.trace_plane()
    }
}

pub fn evaluate(est: &CovarianceImage, reference: &CovarianceImage) -> Result<QualityReport> {
    est.check_same_shape(reference)?;
    QualityReport::compare(&display_plane(est), &display_plane(reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statistics::block_rng;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scene(w: usize, h: usize) -> Plane {
        Plane::from_fn(w, h, |x, y| {
            1.0 + ((x / 8 + y / 5) % 3) as f64 + 0.1 * (x as f64 * 0.3).sin()
        })
    }

    fn add_noise(p: &Plane, std: f64, seed: u64) -> Plane {
        let mut rng = block_rng(seed, 0);
        let data = p
            .data()
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + std * z
            })
            .collect();
        Plane::new(p.width(), p.height(), data).unwrap()
    }

    #[test]
    fn identical_images() {
        let p = scene(20, 16);
        assert_eq!(psnr_q99(&p, &p).unwrap(), f64::INFINITY);
        assert_eq!(ssim(&p, &p).unwrap(), 1.0);
        let json = serde_json::to_string(&QualityReport::compare(&p, &p).unwrap()).unwrap();
        assert!(json.contains("\"psnr_db\":\"+inf\""), "{json}");
    }

    #[test]
    fn constant_offset_is_twenty_db() {
        let r = Plane::filled(16, 16, 1.0);
        let e = r.map(|v| v + 0.1);
        assert!((psnr_q99(&e, &r).unwrap() - 20.0).abs() < 1e-10);
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let mut rng = block_rng(4, 0);
        let r: Vec<f64> = (0..37 * 23).map(|_| rng.random::<f64>() * 5.0).collect();
        let e: Vec<f64> = r.iter().map(|v| v + rng.random::<f64>() - 0.5).collect();
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        let pos = 0.99 * (sorted.len() - 1) as f64;
        let i = pos as usize;
        let peak = sorted[i] * (1.0 - (pos - i as f64)) + sorted[i + 1] * (pos - i as f64);
        let mse = r.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r.len() as f64;
        let expected = 20.0 * peak.log10() - 10.0 * mse.log10();
        let got = psnr_q99(
            &Plane::new(37, 23, e).unwrap(),
            &Plane::new(37, 23, r).unwrap(),
        )
        .unwrap();
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let r = scene(64, 64);
        let mut last = f64::INFINITY;
        for (i, std) in [0.01, 0.03, 0.1, 0.3, 1.0].iter().enumerate() {
            let v = psnr_q99(&add_noise(&r, *std, i as u64), &r).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    /// Brute-force SSIM with explicit 2D windows.
    fn ssim_direct(a: &Plane, b: &Plane) -> f64 {
        let g = gaussian_kernel(SSIM_STD, 5);
        let range = quantile(b.data(), 0.99);
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height() - 11 {
            for x0 in 0..=a.width() - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = g[dx] * g[dy];
                        let (u, v) = (a.at(x0 + dx, y0 + dy), b.at(x0 + dx, y0 + dy));
                        ma += wt * u;
                        mb += wt * v;
                        saa += wt * u * u;
                        sbb += wt * v * v;
                        sab += wt * u * v;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_brute_force() {
        let r = scene(23, 17);
        let e = add_noise(&r, 0.4, 2);
        assert!((ssim(&e, &r).unwrap() - ssim_direct(&e, &r)).abs() < 1e-12);
    }

    #[test]
    fn ssim_low_at_zero_db_snr() {
        let r = scene(64, 64);
        let power = (r.data().iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
        let s = ssim(&add_noise(&r, power, 3), &r).unwrap();
        assert!(s < 0.5, "{s}");
    }

    #[test]
    fn ssim_penalises_affine_rescale() {
        let r = scene(32, 32);
        let s = ssim(&r.map(|v| 1.5 * v + 0.2), &r).unwrap();
        assert!(s < 1.0);
        assert!((s - AFFINE_SSIM).abs() < 1e-9, "{s}");
    }

    const AFFINE_SSIM: f64 = 0.8287412933317011;

    #[test]
    fn small_images_are_rejected() {
        let p = Plane::filled(10, 30, 1.0);
        assert!(ssim(&p, &p).is_err());
        assert!(psnr_q99(&p, &Plane::filled(30, 10, 1.0)).is_err());
    }

    #[test]
    fn display_plane_by_dimension() {
        let i = Plane::from_fn(4, 3, |x, y| (x + y + 1) as f64);
        let c = CovarianceImage::from_intensity(&i);
        assert_eq!(display_plane(&c).at(2, 1), 2.0);
        let c2 = CovarianceImage::from_fn(4, 3, 2, |x, _| {
            crate::hermitian::HermMat::new_2x2(
                x as f64 + 1.0,
                2.0,
                crate::hermitian::C64::new(0.1, 0.0),
            )
        });
        assert_eq!(display_plane(&c2).at(3, 0), 6.0);
    }
}
