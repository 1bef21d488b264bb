//! Separable Gaussian filtering and small order-statistics helpers.

use crate::image::Plane;

/// How samples outside the image are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Half-sample symmetric mirroring: `x[-1] = x[0]`.
    #[default]
    Reflect,
    /// Circular wrap-around.
    Periodic,
}

#[inline]
pub fn boundary_index(i: isize, n: usize, boundary: Boundary) -> usize {
    let n = n as isize;
    match boundary {
        Boundary::Periodic => i.rem_euclid(n) as usize,
        Boundary::Reflect => {
            let period = 2 * n;
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - 1 - m }) as usize
        }
    }
}

/// Normalised Gaussian taps of standard deviation `std` over `[-radius, radius]`.
pub fn gaussian_kernel(std: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * std * std)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable convolution with a symmetric 1D kernel along both axes.
pub fn convolve_separable(img: &Plane, kernel: &[f64], boundary: Boundary) -> Plane {
    let (w, h) = (img.width(), img.height());
    let r = (kernel.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * row[boundary_index(x as isize + t as isize - r, w, boundary)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (t, kv) in kernel.iter().enumerate() {
            let sy = boundary_index(y as isize + t as isize - r, h, boundary);
            let srow = &tmp[sy * w..(sy + 1) * w];
            let drow = &mut out[y * w..(y + 1) * w];
            for (d, s) in drow.iter_mut().zip(srow) {
                *d += kv * s;
            }
        }
    }
    Plane::new(w, h, out).expect("same shape")
}

/// Median of a sample (mean of the two central order statistics for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// `1.4826 median |v - median v|`: a robust standard deviation estimate.
pub fn mad_std(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    1.4826 * median(&dev)
}

/// Quantile with linear interpolation between order statistics (`h = (n - 1) p`).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}
