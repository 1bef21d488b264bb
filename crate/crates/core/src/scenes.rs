//! Built-in speckle-free test scenes.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hermitian::{HermMat, C64};
use crate::image::{CovarianceImage, Plane};

/// Coherence of the four quadrants of [`Scene::Coherence`], row-major.
pub const QUADRANT_COHERENCE: [f64; 4] = [0.3, 0.6, 0.8, 0.95];
const CROSS_PHASE: f64 = 0.7;
const POINT_SPACING: usize = 32;
const POINT_VALUE: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scene {
    Constant,
    /// Rectangles with reflectivities spread over two decades.
    Mosaic,
    /// Isolated bright scatterers on a textured background.
    Points,
    /// Horizontal exponential ramp.
    Gradient,
    /// Constant intensity, one coherence level per quadrant.
    Coherence,
    /// A single bright plateau on a dark line.
    Rectangle,
}

impl Scene {
    pub const ALL: [Scene; 6] = [
        Scene::Constant,
        Scene::Mosaic,
        Scene::Points,
        Scene::Gradient,
        Scene::Coherence,
        Scene::Rectangle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scene::Constant => "constant",
            Scene::Mosaic => "mosaic",
            Scene::Points => "points",
            Scene::Gradient => "gradient",
            Scene::Coherence => "coherence",
            Scene::Rectangle => "rectangle",
        }
    }

    /// Speckle-free reflectivity of the first channel.
    pub fn reflectivity(self, width: usize, height: usize) -> Plane {
        match self {
            Scene::Constant | Scene::Coherence => Plane::filled(width, height, 1.0),
            Scene::Mosaic => {
                const LEVELS: [f64; 8] = [0.1, 0.3, 1.0, 3.0, 10.0, 0.5, 2.0, 6.0];
                Plane::from_fn(width, height, |x, y| {
                    let (bx, by) = (4 * x / width, 4 * y / height);
                    let inner = (x * 8 / width) % 2 == 1 && (y * 8 / height) % 2 == 1;
                    let k = (bx + 3 * by + usize::from(inner) * 5) % LEVELS.len();
                    LEVELS[k]
                })
            }
            Scene::Points => Plane::from_fn(width, height, |x, y| {
                let on_grid = x % POINT_SPACING == POINT_SPACING / 2
                    && y % POINT_SPACING == POINT_SPACING / 2;
                if on_grid {
                    POINT_VALUE
                } else {
                    1.0 + 0.5 * (2.0 * PI * x as f64 / width as f64).sin().powi(2)
                }
            }),
            Scene::Gradient => Plane::from_fn(width, height, |x, _| {
                let t = x as f64 / (width.max(2) - 1) as f64;
                (10f64.ln() * (2.0 * t - 1.0)).exp()
            }),
            Scene::Rectangle => Plane::from_fn(width, height, |x, _| {
                if (width / 3..2 * width / 3).contains(&x) {
                    8.0
                } else {
                    1.0
                }
            }),
        }
    }

    /// Index into [`QUADRANT_COHERENCE`] of the quadrant a pixel falls in.
    pub fn quadrant(x: usize, y: usize, width: usize, height: usize) -> usize {
        usize::from(2 * x >= width) + 2 * usize::from(2 * y >= height)
    }

    fn coherence_at(self, x: usize, y: usize, width: usize, height: usize) -> f64 {
        match self {
            Scene::Coherence => QUADRANT_COHERENCE[Scene::quadrant(x, y, width, height)],
            _ => 0.5,
        }
    }

    /// Ground-truth covariance image. Channel `i` has power `r g_i` with gains
    /// `1, 0.6, 0.8, ...` and correlation `rho^|i-j| e^{i phi (i-j)}`.
    pub fn covariance(self, width: usize, height: usize, dim: usize) -> Result<CovarianceImage> {
        if width == 0 || height == 0 || dim == 0 {
            return Err(Error::InvalidInput(
                "scene size and dimension must be positive".into(),
            ));
        }
        let r = self.reflectivity(width, height);
        if dim == 1 {
            return Ok(CovarianceImage::from_intensity(&r));
        }
        let gains: Vec<f64> = (0..dim)
            .map(|i| {
                if i == 0 {
                    1.0
                } else {
                    0.6 + 0.2 * ((i - 1) % 2) as f64
                }
            })
            .collect();
        Ok(CovarianceImage::from_fn(width, height, dim, |x, y| {
            let rho = self.coherence_at(x, y, width, height);
            let power: Vec<f64> = gains.iter().map(|g| g * r.at(x, y)).collect();
            let mut m = HermMat::from_diag(&power);
            for i in 0..dim {
                for j in i + 1..dim {
                    let lag = (j - i) as f64;
                    let c = C64::from_polar(
                        rho.powf(lag) * (power[i] * power[j]).sqrt(),
                        -CROSS_PHASE * lag,
                    );
                    m.set(i, j, c);
                }
            }
            m
        }))
    }
}

impl FromStr for Scene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scene::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Scene::ALL.iter().map(|s| s.name()).collect();
                Error::InvalidInput(format!(
                    "unknown scene `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}
