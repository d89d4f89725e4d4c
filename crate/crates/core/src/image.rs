//! RGB images with unit-range components.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `height x width x 3` image, interleaved RGB, components in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

/// Range of values seen before clamping to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClampReport {
    pub min: f64,
    pub max: f64,
}

impl ClampReport {
    pub fn clipped(&self) -> bool {
        self.min < 0.0 || self.max > 1.0
    }

    /// Largest distance by which any value left `[0, 1]`.
    pub fn max_excursion(&self) -> f64 {
        (-self.min).max(self.max - 1.0).max(0.0)
    }
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageRgb { height, width, pixels })
    }

    /// Clamp arbitrary values into range, reporting the pre-clamp extent.
    pub fn from_unclamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<(Self, ClampReport)> {
        let mut report = ClampReport { min: f64::INFINITY, max: f64::NEG_INFINITY };
        for v in &mut pixels {
            if !v.is_finite() {
                return Err(Error::NonFinite("image component".into()));
            }
            report.min = report.min.min(*v);
            report.max = report.max.max(*v);
            *v = v.clamp(0.0, 1.0);
        }
        Ok((ImageRgb::new(height, width, pixels)?, report))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(y, x));
            }
        }
        ImageRgb::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// One color channel as a row-major `h * w` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.pixels.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn same_dims(&self, other: &ImageRgb) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "image sizes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// `[1, 3, h, w]` planar tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 3, self.height, self.width], |[_, c, y, x]| {
            T::from_f64(self.pixels[(y * self.width + x) * 3 + c]).unwrap()
        })
    }

    /// Inverse of [`ImageRgb::to_tensor`] for batch item `n`; clamps into range.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<(Self, ClampReport)> {
        let [batch, c, h, w] = t.shape();
        if c != 3 || n >= batch {
            return Err(Error::Dimension(format!("tensor {:?} is not an RGB batch with item {n}", t.shape())));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    pixels.push(t.at(n, ch, y, x).to_f64().unwrap());
                }
            }
        }
        ImageRgb::from_unclamped(h, w, pixels)
    }

    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Result<(Self, ClampReport)> {
        let mut out = Vec::with_capacity(self.pixels.len());
        for px in self.pixels.chunks(3) {
            out.extend_from_slice(&f([px[0], px[1], px[2]]));
        }
        ImageRgb::from_unclamped(self.height, self.width, out)
    }

    /// Quantize to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        ImageRgb::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }
}
