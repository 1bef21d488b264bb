//! Image containers shared across the pipeline.

use crate::error::{Error, Result};
use crate::hermitian::{HermMat, HermStack};

/// A single real-valued image plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} plane needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_shape(&self, other: &Plane) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sq_dist(&self, other: &Plane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel `D x D` covariance matrices over a `width x height` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceImage {
    width: usize,
    height: usize,
    stack: HermStack,
}

impl CovarianceImage {
    pub fn new(width: usize, height: usize, stack: HermStack) -> Result<Self> {
        if stack.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} image needs {} matrices, got {}",
                width,
                height,
                width * height,
                stack.len()
            )));
        }
        Ok(CovarianceImage {
            width,
            height,
            stack,
        })
    }

    /// Single-channel image (`D = 1`) from an intensity plane.
    pub fn from_intensity(intensity: &Plane) -> Self {
        let stack = HermStack::from_planes(1, vec![intensity.data().to_vec()]).expect("one plane");
        CovarianceImage {
            width: intensity.width(),
            height: intensity.height(),
            stack,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        dim: usize,
        f: impl Fn(usize, usize) -> HermMat,
    ) -> Self {
        let mut stack = HermStack::zeros(dim, width * height);
        for y in 0..height {
            for x in 0..width {
                stack.set(y * width + x, &f(x, y));
            }
        }
        CovarianceImage {
            width,
            height,
            stack,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.stack.dim()
    }

    pub fn len(&self) -> usize {
        self.stack.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stack.is_empty()
    }

    pub fn stack(&self) -> &HermStack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut HermStack {
        &mut self.stack
    }

    pub fn into_stack(self) -> HermStack {
        self.stack
    }

    pub fn pixel(&self, k: usize) -> HermMat {
        self.stack.get(k)
    }

    /// Plane `i` of the structure-of-arrays storage.
    pub fn plane(&self, i: usize) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.stack.planes()[i].clone(),
        }
    }

    /// Diagonal entry `i` (an intensity image).
    pub fn intensity(&self, i: usize) -> Plane {
        self.plane(i)
    }

    /// Per-pixel trace.
    pub fn trace_plane(&self) -> Plane {
        let d = self.dim();
        let planes = self.stack.planes();
        let data = (0..self.len())
            .map(|k| (0..d).map(|i| planes[i][k]).sum())
            .collect();
        Plane {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Coherence `|C_ij| / sqrt(C_ii C_jj)` per pixel.
    pub fn coherence(&self, i: usize, j: usize) -> Plane {
        let data = (0..self.len())
            .map(|k| {
                let m = self.pixel(k);
                m.get(i, j).norm() / (m.diag()[i] * m.diag()[j]).sqrt()
            })
            .collect();
        Plane {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn check_same_shape(&self, other: &CovarianceImage) -> Result<()> {
        if self.width == other.width && self.height == other.height && self.dim() == other.dim() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{} D={} vs {}x{} D={}",
                self.width,
                self.height,
                self.dim(),
                other.width,
                other.height,
                other.dim()
            )))
        }
    }
}

/// `D^2` real channel planes: the log-domain parameterisation of a covariance image.
#[derive(Debug, Clone, PartialEq)]
pub struct LogChannelImage {
    width: usize,
    height: usize,
    channels: Vec<Vec<f64>>,
}

impl LogChannelImage {
    pub fn zeros(width: usize, height: usize, n_channels: usize) -> Self {
        LogChannelImage {
            width,
            height,
            channels: vec![vec![0.0; width * height]; n_channels],
        }
    }

    pub fn from_channels(width: usize, height: usize, channels: Vec<Vec<f64>>) -> Result<Self> {
        let nc = channels.len();
        let dim = (nc as f64).sqrt().round() as usize;
        if nc == 0 || dim * dim != nc {
            return Err(Error::ShapeMismatch(format!(
                "channel count {nc} is not a perfect square"
            )));
        }
        if channels.iter().any(|c| c.len() != width * height) {
            return Err(Error::ShapeMismatch(
                "channel length differs from width*height".into(),
            ));
        }
        Ok(LogChannelImage {
            width,
            height,
            channels,
        })
    }

    /// Builds from per-pixel vectors of length `n_channels`.
    pub fn from_pixels(width: usize, height: usize, pixels: &[Vec<f64>]) -> Result<Self> {
        let nc = pixels.first().map_or(0, Vec::len);
        let mut channels = vec![vec![0.0; pixels.len()]; nc];
        for (k, p) in pixels.iter().enumerate() {
            for (c, v) in p.iter().enumerate() {
                channels[c][k] = *v;
            }
        }
        Self::from_channels(width, height, channels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Matrix dimension `D` with `D^2` channels.
    pub fn dim(&self) -> usize {
        (self.channels.len() as f64).sqrt().round() as usize
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.channels
    }

    pub fn channel_plane(&self, i: usize) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.channels[i].clone(),
        }
    }

    pub fn set_channel(&mut self, i: usize, plane: Plane) -> Result<()> {
        if plane.width != self.width || plane.height != self.height {
            return Err(Error::ShapeMismatch(format!(
                "channel plane {}x{} does not match {}x{}",
                plane.width, plane.height, self.width, self.height
            )));
        }
        self.channels[i] = plane.data;
        Ok(())
    }

    pub fn pixel(&self, k: usize) -> Vec<f64> {
        self.channels.iter().map(|c| c[k]).collect()
    }

    pub fn set_pixel(&mut self, k: usize, v: &[f64]) {
        for (c, x) in self.channels.iter_mut().zip(v) {
            c[k] = *x;
        }
    }

    pub fn check_same_shape(&self, other: &LogChannelImage) -> Result<()> {
        if self.width == other.width
            && self.height == other.height
            && self.channels.len() == other.channels.len()
        {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width,
                self.height,
                self.channels.len(),
                other.width,
                other.height,
                other.channels.len()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().flatten().all(|v| v.is_finite())
    }
}
