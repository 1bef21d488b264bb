//! Hermitian matrix calculus.
//!
//! [`HermMat`] stores the real diagonal and the strictly upper triangle of a
//! Hermitian matrix, so Hermitian symmetry holds by construction. The upper
//! entries are kept in *superdiagonal order*: first `(0,1), (1,2), ..`, then
//! `(0,2), (1,3), ..`, ending with `(0, D-1)`. The same ordering is used by the
//! real parameterisation in [`crate::channelizer`] and by the container format.
//!
//! Matrix functions go through a cyclic Jacobi eigensolver. For `D = 2` a
//! closed form (and a batched structure-of-arrays variant over [`HermStack`])
//! avoids the eigensolver entirely.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Largest eigenvalue accepted by [`mat_exp`]; `exp(709.78)` is the largest finite `f64`.
pub const EXP_MAX: f64 = 709.0;

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 30;

/// Iterates the strictly upper-triangular index pairs in superdiagonal order.
pub fn upper_pairs(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..dim).flat_map(move |off| (0..dim - off).map(move |i| (i, i + off)))
}

/// Position of the upper pair `(i, j)`, `i < j`, in superdiagonal order.
#[inline]
pub fn upper_index(dim: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < dim);
    let off = j - i;
    // pairs with offset k < off: sum_{k=1}^{off-1} (dim - k)
    (off - 1) * dim - (off - 1) * off / 2 + i
}

/// Dense square complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    dim: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(dim: usize) -> Self {
        CMat {
            dim,
            data: vec![C64::new(0.0, 0.0); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Self {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), dim, "CMat::from_rows needs a square input");
            m.data[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn adjoint(&self) -> CMat {
        let n = self.dim;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j].conj();
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &CMat) -> CMat {
        assert_eq!(self.dim, rhs.dim);
        let n = self.dim;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let row = &rhs.data[k * n..(k + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, r) in dst.iter_mut().zip(row) {
                    *d += a * r;
                }
            }
        }
        out
    }

    pub fn sub(&self, rhs: &CMat) -> CMat {
        assert_eq!(self.dim, rhs.dim);
        CMat {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> CMat {
        CMat {
            dim: self.dim,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim).map(|i| self.data[i * self.dim + i]).sum()
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.dim + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.dim + j]
    }
}

/// Hermitian `D x D` matrix stored as real diagonal plus strict upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct HermMat {
    diag: Vec<f64>,
    upper: Vec<C64>,
}

impl HermMat {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "Hermitian matrices need dim >= 1");
        HermMat {
            diag: vec![0.0; dim],
            upper: vec![C64::new(0.0, 0.0); dim * (dim - 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diag(&vec![1.0; dim])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        m.diag.copy_from_slice(diag);
        m
    }

    /// Builds from a diagonal and upper entries in superdiagonal order.
    pub fn from_parts(diag: Vec<f64>, upper: Vec<C64>) -> Self {
        let d = diag.len();
        assert!(d >= 1);
        assert_eq!(
            upper.len(),
            d * (d - 1) / 2,
            "upper triangle length mismatch"
        );
        HermMat { diag, upper }
    }

    /// Builds the 2x2 matrix `[[a, c], [conj(c), b]]`.
    pub fn new_2x2(a: f64, b: f64, c: C64) -> Self {
        HermMat {
            diag: vec![a, b],
            upper: vec![c],
        }
    }

    /// Hermitian part of a dense matrix: `(M + M*) / 2`.
    pub fn from_dense(m: &CMat) -> Self {
        let d = m.dim();
        let diag = (0..d).map(|i| m[(i, i)].re).collect();
        let upper = upper_pairs(d)
            .map(|(i, j)| (m[(i, j)] + m[(j, i)].conj()) * 0.5)
            .collect();
        HermMat { diag, upper }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn upper(&self) -> &[C64] {
        &self.upper
    }

    pub fn diag_mut(&mut self) -> &mut [f64] {
        &mut self.diag
    }

    pub fn upper_mut(&mut self) -> &mut [C64] {
        &mut self.upper
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        let d = self.dim();
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => C64::new(self.diag[i], 0.0),
            std::cmp::Ordering::Less => self.upper[upper_index(d, i, j)],
            std::cmp::Ordering::Greater => self.upper[upper_index(d, j, i)].conj(),
        }
    }

    /// Sets entry `(i, j)` and, implicitly, its conjugate mirror.
    /// Diagonal assignments keep only the real part.
    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        let d = self.dim();
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => self.diag[i] = v.re,
            std::cmp::Ordering::Less => self.upper[upper_index(d, i, j)] = v,
            std::cmp::Ordering::Greater => self.upper[upper_index(d, j, i)] = v.conj(),
        }
    }

    pub fn to_dense(&self) -> CMat {
        let d = self.dim();
        let mut m = CMat::zeros(d);
        for i in 0..d {
            m[(i, i)] = C64::new(self.diag[i], 0.0);
        }
        for ((i, j), v) in upper_pairs(d).zip(&self.upper) {
            m[(i, j)] = *v;
            m[(j, i)] = v.conj();
        }
        m
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        let d: f64 = self.diag.iter().map(|x| x * x).sum();
        let u: f64 = self.upper.iter().map(|z| z.norm_sqr()).sum();
        (d + 2.0 * u).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.diag.iter().all(|x| x.is_finite())
            && self
                .upper
                .iter()
                .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn add(&self, rhs: &HermMat) -> HermMat {
        HermMat {
            diag: self
                .diag
                .iter()
                .zip(&rhs.diag)
                .map(|(a, b)| a + b)
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(&rhs.upper)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, rhs: &HermMat) -> HermMat {
        HermMat {
            diag: self
                .diag
                .iter()
                .zip(&rhs.diag)
                .map(|(a, b)| a - b)
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(&rhs.upper)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> HermMat {
        HermMat {
            diag: self.diag.iter().map(|a| a * s).collect(),
            upper: self.upper.iter().map(|a| a * s).collect(),
        }
    }

    /// Real inner product `Re tr(A B)`.
    pub fn inner(&self, rhs: &HermMat) -> f64 {
        let d: f64 = self.diag.iter().zip(&rhs.diag).map(|(a, b)| a * b).sum();
        let u: f64 = self
            .upper
            .iter()
            .zip(&rhs.upper)
            .map(|(a, b)| (a * b.conj()).re)
            .sum();
        d + 2.0 * u
    }

    /// Relative Frobenius distance `||self - other|| / ||other||`.
    pub fn rel_dist(&self, other: &HermMat) -> f64 {
        let n = other.frobenius_norm();
        let diff = self.sub(other).frobenius_norm();
        if n == 0.0 {
            diff
        } else {
            diff / n
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput("matrix has non-finite entries".into()))
        }
    }
}

/// Eigendecomposition `M = E diag(values) E*` of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Unitary matrix whose columns are the eigenvectors.
    pub vectors: CMat,
}

impl Eigen {
    /// Rebuilds `E diag(f(values)) E*`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> HermMat {
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        spectral_combine(&self.vectors, &fv)
    }
}

/// `E diag(w) E*` evaluated on the Hermitian storage only.
pub fn spectral_combine(e: &CMat, w: &[f64]) -> HermMat {
    let d = e.dim();
    let mut out = HermMat::zeros(d);
    for i in 0..d {
        out.diag[i] = (0..d).map(|k| e[(i, k)].norm_sqr() * w[k]).sum();
    }
    for ((i, j), slot) in upper_pairs(d).zip(out.upper.iter_mut()) {
        *slot = (0..d).map(|k| e[(i, k)] * e[(j, k)].conj() * w[k]).sum();
    }
    out
}

/// Eigendecomposition by cyclic complex Jacobi rotations.
///
/// Sweeps until the off-diagonal Frobenius norm drops below `1e-14 ||M||_F`
/// (30 sweeps at most). Eigenvalues come back ascending; each eigenvector is
/// rotated so that its largest-magnitude entry is real and positive.
pub fn eig_hermitian(m: &HermMat) -> Result<Eigen> {
    m.check_finite()?;
    let n = m.dim();
    let mut a = m.to_dense();
    let mut v = CMat::identity(n);
    let scale = m.frobenius_norm();
    let target = JACOBI_TOL * scale;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = upper_pairs(n)
            .map(|(p, q)| a[(p, q)].norm_sqr())
            .sum::<f64>()
            * 2.0;
        if off.sqrt() <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re));
    let values: Vec<f64> = order.iter().map(|&k| a[(k, k)].re).collect();
    let mut vectors = CMat::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        // phase convention: largest-magnitude entry real positive
        let mut best = 0;
        let mut best_mag = -1.0;
        for r in 0..n {
            let mag = v[(r, src)].norm();
            if mag > best_mag * (1.0 + 1e-12) {
                best = r;
                best_mag = mag;
            }
        }
        let pivot = v[(best, src)];
        let phase = if best_mag > 0.0 {
            pivot.conj() / best_mag
        } else {
            C64::new(1.0, 0.0)
        };
        for r in 0..n {
            vectors[(r, dst)] = v[(r, src)] * phase;
        }
        vectors[(best, dst)] = C64::new(vectors[(best, dst)].norm(), 0.0);
    }
    Ok(Eigen { values, vectors })
}

fn rotate(a: &mut CMat, v: &mut CMat, p: usize, q: usize) {
    let apq = a[(p, q)];
    let abs = apq.norm();
    if abs == 0.0 {
        return;
    }
    let app = a[(p, p)].re;
    let aqq = a[(q, q)].re;
    // G = diag(.., e^{-i phi} at q) * R(theta) reduces the pivot to a real 2x2 problem
    let phase = apq / abs;
    let theta = (aqq - app) / (2.0 * abs);
    let t = if theta.is_infinite() {
        0.0
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let ph_c = phase.conj();
    let n = a.dim();

    // A <- A G
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = akp * c - akq * ph_c * s;
        a[(k, q)] = akp * s + akq * ph_c * c;
    }
    // A <- G* A
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = apk * c - aqk * phase * s;
        a[(q, k)] = apk * s + aqk * phase * c;
    }
    a[(p, q)] = C64::new(0.0, 0.0);
    a[(q, p)] = C64::new(0.0, 0.0);
    a[(p, p)] = C64::new(a[(p, p)].re, 0.0);
    a[(q, q)] = C64::new(a[(q, q)].re, 0.0);
    // V <- V G
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = vkp * c - vkq * ph_c * s;
        v[(k, q)] = vkp * s + vkq * ph_c * c;
    }
}

/// Scale-relative eigenvalue floor below which a matrix is not log-transformable.
pub fn eigenvalue_floor(m: &HermMat) -> f64 {
    1e-12 * (m.trace() / m.dim() as f64).max(1.0)
}

/// Matrix logarithm of a Hermitian positive definite matrix.
pub fn mat_log(m: &HermMat) -> Result<HermMat> {
    let eig = eig_hermitian(m)?;
    let floor = eigenvalue_floor(m);
    if eig.values[0] <= floor {
        return Err(Error::NotPositiveDefinite {
            min_eig: eig.values[0],
            floor,
        });
    }
    Ok(eig.apply(f64::ln))
}

/// Matrix exponential of a Hermitian matrix.
pub fn mat_exp(m: &HermMat) -> Result<HermMat> {
    let eig = eig_hermitian(m)?;
    let top = *eig.values.last().unwrap();
    if top > EXP_MAX {
        return Err(Error::Overflow {
            max_eig: top,
            limit: EXP_MAX,
        });
    }
    Ok(eig.apply(f64::exp))
}

/// Symmetric square root of a Hermitian positive semi-definite matrix.
pub fn mat_sqrt(m: &HermMat) -> Result<HermMat> {
    let eig = eig_hermitian(m)?;
    if eig.values[0] < -eigenvalue_floor(m) {
        return Err(Error::NotPositiveDefinite {
            min_eig: eig.values[0],
            floor: 0.0,
        });
    }
    Ok(eig.apply(|l| l.max(0.0).sqrt()))
}

/// Returns true when the smallest eigenvalue clears [`eigenvalue_floor`].
pub fn is_positive_definite(m: &HermMat) -> bool {
    match eig_hermitian(m) {
        Ok(e) => e.values[0] > eigenvalue_floor(m),
        Err(_) => false,
    }
}

// --- closed-form 2x2 ---------------------------------------------------------

/// Log of `[[a, c], [conj c, b]]`, returning `(a~, b~, c~)`.
///
/// `lambda2 = det / lambda1` keeps precision on nearly singular input. Close
/// eigenvalues (`delta < lambda2 / 4`) take `l1 - l2 = ln_1p(delta / lambda2)`;
/// below `delta < 1e-12 (a + b)` the divided difference is replaced by its limit.
#[inline]
fn log_2x2_kernel(a: f64, b: f64, cr: f64, ci: f64) -> (f64, f64, f64, f64) {
    let c2 = cr * cr + ci * ci;
    let amb = a - b;
    let delta = (4.0 * c2 + amb * amb).sqrt();
    let sum = a + b;
    let lam1 = 0.5 * (sum + delta);
    let lam2 = (a * b - c2) / lam1;
    // divided difference (l1 - l2) / delta
    let (dd, mid) = if delta < 1e-12 * sum {
        (2.0 / sum, (0.5 * sum).ln())
    } else if 4.0 * delta < lam2 {
        let l2 = lam2.ln();
        let diff = (delta / lam2).ln_1p();
        (diff / delta, l2 + 0.5 * diff)
    } else {
        let (l1, l2) = (lam1.ln(), lam2.ln());
        ((l1 - l2) / delta, 0.5 * (l1 + l2))
    };
    let half = 0.5 * amb * dd;
    (mid + half, mid - half, cr * dd, ci * dd)
}

#[inline]
fn exp_2x2_kernel(a: f64, b: f64, cr: f64, ci: f64) -> (f64, f64, f64, f64) {
    let amb = a - b;
    let delta = (4.0 * (cr * cr + ci * ci) + amb * amb).sqrt();
    let e2 = (0.5 * (a + b - delta)).exp();
    let e1 = (0.5 * (a + b + delta)).exp();
    // divided difference (e1 - e2) / delta
    let dd = if delta < 1e-12 {
        e2
    } else {
        e2 * delta.exp_m1() / delta
    };
    let mid = 0.5 * (e1 + e2);
    let half = 0.5 * amb * dd;
    (mid + half, mid - half, cr * dd, ci * dd)
}

fn expect_2x2(m: &HermMat) -> Result<()> {
    if m.dim() != 2 {
        return Err(Error::InvalidInput(format!(
            "closed-form path needs D = 2, got D = {}",
            m.dim()
        )));
    }
    m.check_finite()
}

/// Closed-form matrix logarithm for `D = 2`.
pub fn mat_log_2x2(m: &HermMat) -> Result<HermMat> {
    expect_2x2(m)?;
    let (a, b, c) = (m.diag[0], m.diag[1], m.upper[0]);
    let det = a * b - c.norm_sqr();
    let floor = eigenvalue_floor(m);
    if a <= 0.0 || b <= 0.0 || det <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            min_eig: if det <= 0.0 { det.min(0.0) } else { a.min(b) },
            floor,
        });
    }
    let (la, lb, lr, li) = log_2x2_kernel(a, b, c.re, c.im);
    Ok(HermMat::new_2x2(la, lb, C64::new(lr, li)))
}

/// Closed-form matrix exponential for `D = 2`.
pub fn mat_exp_2x2(m: &HermMat) -> Result<HermMat> {
    expect_2x2(m)?;
    let (a, b, c) = (m.diag[0], m.diag[1], m.upper[0]);
    let top = 0.5 * (a + b + (4.0 * c.norm_sqr() + (a - b).powi(2)).sqrt());
    if top > EXP_MAX {
        return Err(Error::Overflow {
            max_eig: top,
            limit: EXP_MAX,
        });
    }
    let (ea, eb, er, ei) = exp_2x2_kernel(a, b, c.re, c.im);
    Ok(HermMat::new_2x2(ea, eb, C64::new(er, ei)))
}

// --- stacks ------------------------------------------------------------------

/// A stack of `len` Hermitian matrices stored as `D^2` contiguous planes:
/// `D` diagonal planes, then a (real, imaginary) plane pair per upper entry in
/// superdiagonal order.
#[derive(Debug, Clone, PartialEq)]
pub struct HermStack {
    dim: usize,
    len: usize,
    planes: Vec<Vec<f64>>,
}

impl HermStack {
    pub fn zeros(dim: usize, len: usize) -> Self {
        assert!(dim >= 1);
        HermStack {
            dim,
            len,
            planes: vec![vec![0.0; len]; dim * dim],
        }
    }

    pub fn from_planes(dim: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 || planes.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} planes for D = {dim}, got {}",
                dim * dim,
                planes.len()
            )));
        }
        let len = planes[0].len();
        if planes.iter().any(|p| p.len() != len) {
            return Err(Error::ShapeMismatch("planes differ in length".into()));
        }
        Ok(HermStack { dim, len, planes })
    }

    pub fn from_mats(dim: usize, mats: &[HermMat]) -> Self {
        let mut s = Self::zeros(dim, mats.len());
        for (k, m) in mats.iter().enumerate() {
            s.set(k, m);
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn planes(&self) -> &[Vec<f64>] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.planes
    }

    pub fn into_planes(self) -> Vec<Vec<f64>> {
        self.planes
    }

    pub fn get(&self, k: usize) -> HermMat {
        let d = self.dim;
        let diag = (0..d).map(|i| self.planes[i][k]).collect();
        let upper = (0..d * (d - 1) / 2)
            .map(|u| C64::new(self.planes[d + 2 * u][k], self.planes[d + 2 * u + 1][k]))
            .collect();
        HermMat { diag, upper }
    }

    pub fn set(&mut self, k: usize, m: &HermMat) {
        let d = self.dim;
        assert_eq!(m.dim(), d);
        for i in 0..d {
            self.planes[i][k] = m.diag[i];
        }
        for (u, z) in m.upper.iter().enumerate() {
            self.planes[d + 2 * u][k] = z.re;
            self.planes[d + 2 * u + 1][k] = z.im;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = HermMat> + '_ {
        (0..self.len).map(move |k| self.get(k))
    }

    /// Applies a per-matrix function in parallel, keeping pixel context on errors.
    pub fn try_map(&self, f: impl Fn(&HermMat) -> Result<HermMat> + Sync) -> Result<HermStack> {
        use rayon::prelude::*;
        let mats: Vec<HermMat> = (0..self.len)
            .into_par_iter()
            .map(|k| f(&self.get(k)).map_err(|e| e.at_pixel(k)))
            .collect::<Result<_>>()?;
        Ok(HermStack::from_mats(self.dim, &mats))
    }
}

fn expect_stack_2x2(s: &HermStack) -> Result<()> {
    if s.dim != 2 {
        return Err(Error::InvalidInput(format!(
            "batched closed form needs D = 2, got D = {}",
            s.dim
        )));
    }
    Ok(())
}

/// Batched closed-form logarithm over a `D = 2` stack.
pub fn mat_log_2x2_batch(s: &HermStack) -> Result<HermStack> {
    expect_stack_2x2(s)?;
    let [a, b, cr, ci] = [&s.planes[0], &s.planes[1], &s.planes[2], &s.planes[3]];
    let mut out = HermStack::zeros(2, s.len);
    let (oa, rest) = out.planes.split_at_mut(1);
    let (ob, rest) = rest.split_at_mut(1);
    let (ocr, oci) = rest.split_at_mut(1);
    let mut valid = true;
    for k in 0..s.len {
        let det = a[k] * b[k] - cr[k] * cr[k] - ci[k] * ci[k];
        valid &= a[k] > 0.0 && b[k] > 0.0 && det > 0.0 && det.is_finite();
        let (la, lb, lr, li) = log_2x2_kernel(a[k], b[k], cr[k], ci[k]);
        oa[0][k] = la;
        ob[0][k] = lb;
        ocr[0][k] = lr;
        oci[0][k] = li;
    }
    if !valid {
        let k = (0..s.len)
            .find(|&k| {
                let det = a[k] * b[k] - cr[k] * cr[k] - ci[k] * ci[k];
                !(a[k] > 0.0 && b[k] > 0.0 && det > 0.0 && det.is_finite())
            })
            .expect("an invalid entry exists");
        let det = a[k] * b[k] - cr[k] * cr[k] - ci[k] * ci[k];
        return Err(Error::NotPositiveDefinite {
            min_eig: det.min(a[k]).min(b[k]),
            floor: 0.0,
        }
        .at_pixel(k));
    }
    Ok(out)
}

/// Batched closed-form exponential over a `D = 2` stack.
pub fn mat_exp_2x2_batch(s: &HermStack) -> Result<HermStack> {
    expect_stack_2x2(s)?;
    let [a, b, cr, ci] = [&s.planes[0], &s.planes[1], &s.planes[2], &s.planes[3]];
    let mut out = HermStack::zeros(2, s.len);
    for k in 0..s.len {
        let top = 0.5
            * (a[k]
                + b[k]
                + (4.0 * (cr[k] * cr[k] + ci[k] * ci[k]) + (a[k] - b[k]).powi(2)).sqrt());
        if !(top <= EXP_MAX) {
            return Err(Error::Overflow {
                max_eig: top,
                limit: EXP_MAX,
            }
            .at_pixel(k));
        }
        let (ea, eb, er, ei) = exp_2x2_kernel(a[k], b[k], cr[k], ci[k]);
        out.planes[0][k] = ea;
        out.planes[1][k] = eb;
        out.planes[2][k] = er;
        out.planes[3][k] = ei;
    }
    Ok(out)
}

/// Matrix log over a whole stack; the closed form is used when `D = 2`.
pub fn mat_log_stack(s: &HermStack) -> Result<HermStack> {
    if s.dim == 2 {
        mat_log_2x2_batch(s)
    } else {
        s.try_map(mat_log)
    }
}

/// Matrix exp over a whole stack; the closed form is used when `D = 2`.
pub fn mat_exp_stack(s: &HermStack) -> Result<HermStack> {
    if s.dim == 2 {
        mat_exp_2x2_batch(s)
    } else {
        s.try_map(mat_exp)
    }
}

// --- differentials -------------------------------------------------------------

/// Midpoints `u_q = (q - 1/2) / Q`, `q = 1..=Q`.
pub fn midpoints(q: usize) -> impl Iterator<Item = f64> {
    let qf = q as f64;
    (1..=q).map(move |k| (k as f64 - 0.5) / qf)
}

/// Q-rectangle midpoint approximation of the Fréchet derivative of `exp` at
/// `h` in direction `dh`: `int_0^1 e^{uH} dH e^{(1-u)H} du`.
///
/// Evaluated in the eigenbasis of `H`, where each rectangle only rescales the
/// entries of `E* dH E`.
pub fn exp_directional_derivative(h: &HermMat, dh: &HermMat, q: usize) -> Result<HermMat> {
    if q == 0 {
        return Err(Error::InvalidInput("need at least one rectangle".into()));
    }
    dh.check_finite()?;
    let eig = eig_hermitian(h)?;
    let top = *eig.values.last().unwrap();
    if top > EXP_MAX {
        return Err(Error::Overflow {
            max_eig: top,
            limit: EXP_MAX,
        });
    }
    let lam = &eig.values;
    let weights = |i: usize, j: usize| -> f64 {
        midpoints(q)
            .map(|u| (u * lam[i] + (1.0 - u) * lam[j]).exp())
            .sum::<f64>()
            / q as f64
    };
    Ok(eigenbasis_hadamard(&eig.vectors, &dh.to_dense(), weights))
}

/// Returns the Hermitian part of `E ((E* M E) o W) E*` for a real symmetric weight `W`.
pub fn eigenbasis_hadamard(e: &CMat, m: &CMat, w: impl Fn(usize, usize) -> f64) -> HermMat {
    let n = e.dim();
    let eh = e.adjoint();
    let mut inner = eh.matmul(m).matmul(e);
    for i in 0..n {
        for j in 0..n {
            inner[(i, j)] *= w(i, j);
        }
    }
    HermMat::from_dense(&e.matmul(&inner).matmul(&eh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    pub(crate) fn random_hermitian(rng: &mut impl Rng, d: usize, s: f64) -> HermMat {
        let diag = (0..d).map(|_| s * rng.random_range(-1.0..1.0)).collect();
        let upper = (0..d * (d - 1) / 2)
            .map(|_| {
                c(
                    s * rng.random_range(-1.0..1.0),
                    s * rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        HermMat::from_parts(diag, upper)
    }

    fn random_pd(rng: &mut impl Rng, d: usize) -> HermMat {
        let g = random_hermitian(rng, d, 1.0).to_dense();
        let gg = g.matmul(&g.adjoint());
        HermMat::from_dense(&gg).add(&HermMat::identity(d).scale(0.05))
    }

    #[test]
    fn upper_index_matches_iteration_order() {
        for d in 1..8 {
            for (k, (i, j)) in upper_pairs(d).enumerate() {
                assert_eq!(upper_index(d, i, j), k);
            }
        }
        // (0, D-1) is the last pair
        assert_eq!(upper_pairs(4).last(), Some((0, 3)));
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = eig_hermitian(&HermMat::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
        let e = eig_hermitian(&HermMat::from_diag(&[4.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![1.0, 4.0]);
        assert!((e.vectors[(1, 0)].re - 1.0).abs() < 1e-15);
        assert!((e.vectors[(0, 1)].re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eig_real_symmetric_2x2() {
        // char. polynomial (2 - l)^2 - 1 => l = 1, 3
        let m = HermMat::new_2x2(2.0, 2.0, c(1.0, 0.0));
        let e = eig_hermitian(&m).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14);
        assert!((e.values[1] - 3.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // phase convention: largest entry real positive (ties resolved to the first row)
        let v0 = (e.vectors[(0, 0)], e.vectors[(1, 0)]);
        let v1 = (e.vectors[(0, 1)], e.vectors[(1, 1)]);
        assert!((v0.0 - c(r, 0.0)).norm() < 1e-12 && (v0.1 - c(-r, 0.0)).norm() < 1e-12);
        assert!((v1.0 - c(r, 0.0)).norm() < 1e-12 && (v1.1 - c(r, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn eig_reconstructs_and_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [1, 2, 3, 4, 6, 9, 16] {
            for _ in 0..20 {
                let m = random_hermitian(&mut rng, d, 3.0);
                let e = eig_hermitian(&m).unwrap();
                let rec = e.apply(|l| l);
                assert!(
                    rec.sub(&m).frobenius_norm() <= 1e-12 * m.frobenius_norm().max(1e-300) * 10.0
                );
                let ee = e.vectors.adjoint().matmul(&e.vectors);
                assert!(ee.sub(&CMat::identity(d)).frobenius_norm() < 1e-12);
                assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn eig_rejects_non_finite() {
        let m = HermMat::new_2x2(f64::NAN, 1.0, c(0.0, 0.0));
        assert!(matches!(eig_hermitian(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn log_exp_simple_cases() {
        let z = mat_log(&HermMat::identity(3)).unwrap();
        assert!(z.frobenius_norm() < 1e-15);
        let e = std::f64::consts::E;
        let l = mat_log(&HermMat::from_diag(&[e, e * e])).unwrap();
        assert!((l.diag()[0] - 1.0).abs() < 1e-15 && (l.diag()[1] - 2.0).abs() < 1e-15);
        let x = mat_exp(&HermMat::zeros(2)).unwrap();
        assert_eq!(x, HermMat::identity(2));
        let x = mat_exp(&HermMat::from_diag(&[1.0, 2.0])).unwrap();
        assert!((x.diag()[0] - e).abs() < 1e-15 && (x.diag()[1] - e * e).abs() < 1e-14);
    }

    #[test]
    fn log_from_chosen_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [2, 3, 5] {
            // unitary from the eigenvectors of a random Hermitian matrix
            let u = eig_hermitian(&random_hermitian(&mut rng, d, 1.0))
                .unwrap()
                .vectors;
            let lam: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..10.0)).collect();
            let m = spectral_combine(&u, &lam);
            let expect = spectral_combine(&u, &lam.iter().map(|l| l.ln()).collect::<Vec<_>>());
            let got = mat_log(&m).unwrap();
            assert!(got.sub(&expect).frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn log_rejects_singular_and_exp_overflow() {
        let rank1 = HermMat::new_2x2(1.0, 1.0, c(1.0, 0.0));
        assert!(matches!(
            mat_log(&rank1),
            Err(Error::NotPositiveDefinite { .. })
        ));
        assert!(matches!(
            mat_log_2x2(&rank1),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let big = HermMat::from_diag(&[800.0, 0.0]);
        assert!(matches!(mat_exp(&big), Err(Error::Overflow { .. })));
        assert!(matches!(mat_exp_2x2(&big), Err(Error::Overflow { .. })));
    }

    #[test]
    fn closed_form_cases() {
        let z = mat_log_2x2(&HermMat::identity(2)).unwrap();
        assert_eq!(z, HermMat::zeros(2));
        let e = std::f64::consts::E;
        let l = mat_log_2x2(&HermMat::new_2x2(e, e * e, c(0.0, 0.0))).unwrap();
        assert!((l.diag()[0] - 1.0).abs() < 1e-15 && (l.diag()[1] - 2.0).abs() < 1e-15);
        assert_eq!(l.upper()[0], c(0.0, 0.0));
        // eigenvalues 1 and 3
        let m = HermMat::new_2x2(2.0, 2.0, c(1.0, 0.0));
        let l = mat_log_2x2(&m).unwrap();
        let oracle = mat_log(&m).unwrap();
        let l3 = 3f64.ln();
        assert!((l.diag()[0] - l3 / 2.0).abs() < 1e-15);
        assert!((l.diag()[1] - l3 / 2.0).abs() < 1e-15);
        assert!((l.upper()[0].re - l3 / 2.0).abs() < 1e-15);
        assert!(l.rel_dist(&oracle) < 1e-12);
    }

    #[test]
    fn closed_form_near_degenerate_is_smooth() {
        for eps in [0.0, 1e-14, 1e-10, 1e-6] {
            let m = HermMat::new_2x2(2.0 + eps, 2.0, c(eps, -eps));
            let l = mat_log_2x2(&m).unwrap();
            assert!(l.is_finite());
            assert!(l.rel_dist(&mat_log(&m).unwrap()) < 1e-10);
            let x = mat_exp_2x2(&l).unwrap();
            assert!(x.rel_dist(&m) < 1e-12);
        }
    }

    #[test]
    fn batched_matches_scalar_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mats: Vec<HermMat> = (0..200).map(|_| random_pd(&mut rng, 2)).collect();
        let stack = HermStack::from_mats(2, &mats);
        let logs = mat_log_2x2_batch(&stack).unwrap();
        for (k, m) in mats.iter().enumerate() {
            assert_eq!(logs.get(k), mat_log_2x2(m).unwrap());
        }
        let back = mat_exp_2x2_batch(&logs).unwrap();
        for (k, m) in mats.iter().enumerate() {
            assert!(back.get(k).rel_dist(m) < 1e-12);
        }
    }

    #[test]
    fn stack_error_names_pixel() {
        let mats = vec![
            HermMat::identity(3),
            HermMat::identity(3),
            HermMat::from_diag(&[1.0, 0.0, 1.0]),
        ];
        let s = HermStack::from_mats(3, &mats);
        match mat_log_stack(&s) {
            Err(Error::AtPixel { pixel, .. }) => assert_eq!(pixel, 2),
            other => panic!("unexpected {other:?}"),
        }
        let s2 = HermStack::from_mats(2, &[HermMat::identity(2), HermMat::from_diag(&[1.0, -1.0])]);
        match mat_log_stack(&s2) {
            Err(Error::AtPixel { pixel, .. }) => assert_eq!(pixel, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn directional_derivative_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dh = random_hermitian(&mut rng, 3, 1.0);
        let r = exp_directional_derivative(&HermMat::zeros(3), &dh, 4).unwrap();
        assert!(r.sub(&dh).frobenius_norm() < 1e-14);
        // commuting diagonal case is exact for any Q
        let h = HermMat::from_diag(&[0.3, -1.2, 2.0]);
        let dhd = HermMat::from_diag(&[1.0, 2.0, -0.5]);
        let expect = HermMat::from_diag(&[0.3f64.exp(), 2.0 * (-1.2f64).exp(), -0.5 * 2f64.exp()]);
        let r = exp_directional_derivative(&h, &dhd, 1).unwrap();
        assert!(r.sub(&expect).frobenius_norm() < 1e-13);
    }

    #[test]
    fn directional_derivative_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let h = random_hermitian(&mut rng, 2, 1.0);
            let dh = random_hermitian(&mut rng, 2, 1.0);
            let t = 1e-6;
            let fd = mat_exp(&h.add(&dh.scale(t)))
                .unwrap()
                .sub(&mat_exp(&h).unwrap())
                .scale(1.0 / t);
            let r = exp_directional_derivative(&h, &dh, 100).unwrap();
            assert!(r.rel_dist(&fd) <= 1e-4, "rel err {}", r.rel_dist(&fd));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn herm(d: usize) -> impl Strategy<Value = HermMat> {
            (
                proptest::collection::vec(-3.0..3.0f64, d),
                proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64), d * (d - 1) / 2),
            )
                .prop_map(|(diag, up)| {
                    HermMat::from_parts(diag, up.into_iter().map(|(r, i)| C64::new(r, i)).collect())
                })
        }

        proptest! {
            #[test]
            fn exp_then_log_roundtrip(d in 1usize..7, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let h = random_hermitian(&mut rng, d, 2.0);
                let m = mat_exp(&h).unwrap();
                let back = mat_exp(&mat_log(&m).unwrap()).unwrap();
                prop_assert!(back.rel_dist(&m) <= 1e-10);
            }

            #[test]
            fn trace_log_is_log_det(m in herm(2)) {
                let pd = mat_exp(&m).unwrap();
                let tr = mat_log(&pd).unwrap().trace();
                let det = pd.diag()[0] * pd.diag()[1] - pd.upper()[0].norm_sqr();
                prop_assert!((tr - det.ln()).abs() <= 1e-10 * det.ln().abs().max(1.0));
            }

            #[test]
            fn directional_derivative_is_hermitian_storage(h in herm(3), dh in herm(3), q in 1usize..9) {
                let r = exp_directional_derivative(&h, &dh, q).unwrap();
                // real symmetric midpoint weights keep the dense result Hermitian
                let dense = r.to_dense();
                prop_assert!(dense.sub(&dense.adjoint()).frobenius_norm() == 0.0);
                prop_assert!(r.is_finite());
            }
        }
    }
}
