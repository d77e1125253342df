use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image geometry as height × width × channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
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

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Tensor dims in NCHW order for a batch of `n`.
    pub fn nchw(&self, n: usize) -> [i64; 4] {
        [n as i64, self.channels as i64, self.height as i64, self.width as i64]
    }

    pub fn as_hwc(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Whole image mapped so that its minimum is 0 and maximum is 1.
    MinMax,
    /// Same as `MinMax`, applied independently per channel.
    ChannelMinMax,
}

/// A single image, stored channel-major (C, H, W) to match the tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    shape: ImageShape,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(shape: ImageShape, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != shape.len() {
            return Err(Error::Shape {
                expected: vec![shape.len() as i64],
                actual: vec![pixels.len() as i64],
            });
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::format("image", format!("non-finite pixel at {i}")));
        }
        Ok(Self { shape, pixels })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            pixels: vec![0.0; shape.len()],
        }
    }

    /// Builds an image from interleaved HWC pixels (the usual on-disk layout).
    pub fn from_hwc(shape: ImageShape, hwc: &[f32]) -> Result<Self> {
        if hwc.len() != shape.len() {
            return Err(Error::Shape {
                expected: vec![shape.len() as i64],
                actual: vec![hwc.len() as i64],
            });
        }
        let mut pixels = vec![0.0; shape.len()];
        hwc_to_chw(shape, hwc, &mut pixels);
        Self::new(shape, pixels)
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.shape.plane();
        &self.pixels[c * p..(c + 1) * p]
    }

    /// Value at (row, col, channel).
    pub fn at(&self, row: usize, col: usize, c: usize) -> f32 {
        self.pixels[c * self.shape.plane() + row * self.shape.width + col]
    }

    pub fn to_hwc(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.shape.len()];
        let (p, ch) = (self.shape.plane(), self.shape.channels);
        for c in 0..ch {
            for i in 0..p {
                out[i * ch + c] = self.pixels[c * p + i];
            }
        }
        out
    }

    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip(other, |a, b| a + b)
    }

    fn zip(&self, other: &Image, f: impl Fn(f32, f32) -> f32) -> Result<Image> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                expected: self.shape.as_hwc().iter().map(|&d| d as i64).collect(),
                actual: other.shape.as_hwc().iter().map(|&d| d as i64).collect(),
            });
        }
        Ok(Image {
            shape: self.shape,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn l1_norm(&self) -> f64 {
        self.pixels.iter().map(|v| v.abs() as f64).sum()
    }
}

pub(crate) fn hwc_to_chw<T: Copy>(shape: ImageShape, hwc: &[T], chw: &mut [T]) {
    let (p, ch) = (shape.plane(), shape.channels);
    for i in 0..p {
        for c in 0..ch {
            chw[c * p + i] = hwc[i * ch + c];
        }
    }
}

/// Min-max normalization. A zero-range image (or channel) maps to zeros.
pub fn normalize(raw: &Image, mode: Normalization) -> Image {
    let mut out = raw.clone();
    normalize_in_place(out.shape, &mut out.pixels, mode);
    out
}

pub(crate) fn normalize_in_place(shape: ImageShape, pixels: &mut [f32], mode: Normalization) {
    match mode {
        Normalization::MinMax => rescale(pixels),
        Normalization::ChannelMinMax => {
            for plane in pixels.chunks_mut(shape.plane()) {
                rescale(plane);
            }
        }
    }
}

fn rescale(values: &mut [f32]) {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if !(range > 0.0) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (lo, range) = (lo as f64, range as f64);
    for v in values.iter_mut() {
        *v = ((*v as f64 - lo) / range) as f32;
    }
}
