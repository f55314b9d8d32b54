//! Dense H×W×C image type shared by every other module.
//!
//! Storage is row-major with interleaved channels: pixel `(r, c, ch)` lives at
//! flat offset `(r * width + c) * channels + ch`. Values are `f64` regardless
//! of the bit depth of the file they came from.

mod io;
mod metrics;

pub use io::{load_image, save_image, BitDepth};
pub use metrics::{mse, psnr, ssim, Metrics, PSNR_CAP_DB};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: Shape,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from row-major interleaved data.
    ///
    /// Rejects zero dimensions, channel counts other than 1 or 3, a data
    /// length that does not match the shape, and non-finite values.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        let shape = Shape::new(height, width, channels);
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Image { shape, data })
    }

    pub fn from_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        Image::new(shape.height, shape.width, shape.channels, data)
    }

    /// A `1 × d × 1` image holding a plain vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let d = data.len();
        Image::new(1, d, 1, data)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        assert!(
            shape.height > 0 && shape.width > 0 && (shape.channels == 1 || shape.channels == 3),
            "invalid shape {shape}"
        );
        Image {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Image::filled(shape, 0.0)
    }

    pub fn zeros_like(&self) -> Self {
        Image::zeros(self.shape)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for r in 0..shape.height {
            for c in 0..shape.width {
                for ch in 0..shape.channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Image::from_shape(shape, data)
    }

    /// Internal constructor for results of arithmetic on finite inputs.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Image { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.shape.width + c) * self.shape.channels + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.offset(r, c, ch)]
    }

    #[inline]
    pub(crate) fn set(&mut self, r: usize, c: usize, ch: usize, v: f64) {
        let o = self.offset(r, c, ch);
        self.data[o] = v;
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "expected {}, got {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination; panics on shape mismatch.
    pub fn zip_map(&self, other: &Image, mut f: impl FnMut(f64, f64) -> f64) -> Image {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Image::from_raw(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Image) -> Image {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Image) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    pub fn dot(&self, other: &Image) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    /// One channel as a row-major `height × width` plane.
    pub fn plane(&self, ch: usize) -> Vec<f64> {
        let c = self.shape.channels;
        self.data.iter().skip(ch).step_by(c).copied().collect()
    }

    pub(crate) fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Image {
        let channels = planes.len();
        let shape = Shape::new(height, width, channels);
        let mut data = vec![0.0; shape.len()];
        for (ch, plane) in planes.iter().enumerate() {
            debug_assert_eq!(plane.len(), height * width);
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + ch] = v;
            }
        }
        Image::from_raw(shape, data)
    }
}
