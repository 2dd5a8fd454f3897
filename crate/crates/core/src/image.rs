//! Dense image container shared by every stage of the pipeline.
//!
//! Pixels are stored planar (channel-major, then row, then column) so a
//! batch of images maps onto the network's NCHW layout without shuffling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared value range of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Range {
    /// `[0, 1]`, the on-disk and metric range.
    Unit,
    /// `[-1, 1]`, the range the diffusion chain runs in.
    Symmetric,
    /// `[0, 255]`.
    Byte,
    /// Network activations, noise draws and anything else unbounded.
    Unbounded,
}

impl Range {
    pub fn bounds(self) -> Option<(f64, f64)> {
        match self {
            Range::Unit => Some((0.0, 1.0)),
            Range::Symmetric => Some((-1.0, 1.0)),
            Range::Byte => Some((0.0, 255.0)),
            Range::Unbounded => None,
        }
    }

    /// Peak value used for PSNR in this range.
    pub fn peak(self) -> Option<f64> {
        match self {
            Range::Unit => Some(1.0),
            Range::Symmetric => Some(2.0),
            Range::Byte => Some(255.0),
            Range::Unbounded => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    range: Range,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(height: usize, width: usize, channels: usize, range: Range) -> Self {
        Self::filled(height, width, channels, range, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, range: Range, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            range,
            values: vec![value; height * width * channels],
        }
    }

    /// Wraps planar `values`; fails unless `values.len() == height * width * channels`.
    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        range: Range,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            range,
            values,
        })
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        range: Range,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            range,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> Range {
        self.range
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    /// Relabels the range without touching values.
    pub fn with_range(mut self, range: Range) -> Self {
        self.range = range;
        self
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Clamps every value into the declared range (no-op when unbounded).
    pub fn clamp_to_range(&mut self) {
        if let Some((lo, hi)) = self.range.bounds() {
            for v in &mut self.values {
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// Linear conversion between bounded ranges, clamping the result.
    pub fn convert(&self, to: Range) -> Self {
        let (Some((a0, a1)), Some((b0, b1))) = (self.range.bounds(), to.bounds()) else {
            return self.clone().with_range(to);
        };
        if self.range == to {
            return self.clone();
        }
        let scale = (b1 - b0) / (a1 - a0);
        let values = self
            .values
            .iter()
            .map(|&v| ((v - a0) * scale + b0).clamp(b0, b1))
            .collect();
        Self {
            values,
            range: to,
            ..*self
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, self.channels, self.range, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    /// Rec. 601 luma per pixel, row-major, as f64. Single-channel images pass through.
    pub fn luma(&self) -> Vec<f64> {
        let n = self.height * self.width;
        if self.channels < 3 {
            return self.plane(0).to_vec();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..n)
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Decodes an 8-bit RGB image into the unit range.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, 3, Range::Unit, |y, x, c| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        }))
    }

    /// Quantized 8-bit pixels (RGB interleaved) after conversion to the byte range.
    pub fn to_rgb8_bytes(&self) -> Vec<u8> {
        let unit = self.convert(Range::Unit);
        let mut out = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let c = c.min(self.channels - 1);
                    out.push((unit.get(y, x, c) * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Encodes as 8-bit RGB PNG. Grayscale images are replicated to three channels.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.to_rgb8_bytes(),
        )
        .expect("buffer length matches dimensions");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Round-trips through 8-bit quantization, as a PNG save/load would.
    pub fn quantized(&self) -> Self {
        let bytes = self.to_rgb8_bytes();
        let (h, w) = (self.height, self.width);
        Self::from_fn(h, w, 3, Range::Unit, |y, x, c| {
            bytes[(y * w + x) * 3 + c] as f64 / 255.0
        })
    }
}
