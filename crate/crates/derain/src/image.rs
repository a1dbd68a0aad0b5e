//! Image representation, channel access, patch extraction, and lossless I/O.
//!
//! Intensities live in `[0, 1]` as `f64`; element order is row-major
//! (height, width, channel) with channels fixed to (R, G, B) for color
//! images. One fixed convention keeps golden files bit-exact.

use std::path::Path;

use crate::error::{Error, Result};

/// A dense H x W x C intensity raster, C in {1, 3}.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Arity("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Arity(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Arity(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
            .expect("zeros with valid dims")
    }

    /// Builds an image by evaluating `f(row, col, channel)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data).expect("from_fn with valid dims")
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width && channel < self.channels);
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, v: f64) {
        debug_assert!(row < self.height && col < self.width && channel < self.channels);
        self.data[(row * self.width + col) * self.channels + channel] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Clamps every element into `[0, 1]`. Idempotent.
    pub fn clamp01(&self) -> Self {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self { height: self.height, width: self.width, channels: self.channels, data }
    }

    /// Snaps every element to the nearest of the 256 8-bit levels, exactly
    /// reproducing what a PNG save/load round trip does to the values.
    pub fn quantize8(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Self { height: self.height, width: self.width, channels: self.channels, data }
    }

    /// Splits a 3-channel image into (R, G, B) planes.
    pub fn split_channels(&self) -> Result<[ImageTensor; 3]> {
        if self.channels != 3 {
            return Err(Error::Arity(format!(
                "split_channels needs 3 channels, got {}",
                self.channels
            )));
        }
        let hw = self.height * self.width;
        let mut planes = [
            Vec::with_capacity(hw),
            Vec::with_capacity(hw),
            Vec::with_capacity(hw),
        ];
        for px in self.data.chunks_exact(3) {
            planes[0].push(px[0]);
            planes[1].push(px[1]);
            planes[2].push(px[2]);
        }
        let mk = |d| ImageTensor::new(self.height, self.width, 1, d).expect("plane shape");
        let [r, g, b] = planes;
        Ok([mk(r), mk(g), mk(b)])
    }

    /// Inverse of [`split_channels`]: interleaves three same-shape planes.
    pub fn merge_channels(planes: &[ImageTensor; 3]) -> Result<ImageTensor> {
        let [r, g, b] = planes;
        if r.channels != 1 || g.channels != 1 || b.channels != 1 {
            return Err(Error::Arity("merge_channels needs single-channel planes".into()));
        }
        if !r.same_shape(g) || !r.same_shape(b) {
            return Err(Error::Arity("merge_channels planes differ in shape".into()));
        }
        let mut data = Vec::with_capacity(r.data.len() * 3);
        for i in 0..r.data.len() {
            data.push(r.data[i]);
            data.push(g.data[i]);
            data.push(b.data[i]);
        }
        ImageTensor::new(r.height, r.width, 3, data)
    }

    /// Copies the square window described by `spec`.
    pub fn extract_patch(&self, spec: &PatchSpec) -> Result<ImageTensor> {
        spec.validate(self)?;
        let mut data = Vec::with_capacity(spec.size * spec.size * self.channels);
        for r in 0..spec.size {
            let row = spec.origin_row + r;
            let start = (row * self.width + spec.origin_col) * self.channels;
            data.extend_from_slice(&self.data[start..start + spec.size * self.channels]);
        }
        ImageTensor::new(spec.size, spec.size, self.channels, data)
    }
}

/// A square crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub size: usize,
    pub origin_row: usize,
    pub origin_col: usize,
}

impl PatchSpec {
    pub fn validate(&self, img: &ImageTensor) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Bounds("patch size must be positive".into()));
        }
        if self.origin_row + self.size > img.height || self.origin_col + self.size > img.width {
            return Err(Error::Bounds(format!(
                "patch {}x{} at ({}, {}) exceeds image {}x{}",
                self.size, self.size, self.origin_row, self.origin_col, img.height, img.width
            )));
        }
        Ok(())
    }
}

/// Loads an 8-bit lossless raster; value `v` maps to `v / 255`.
///
/// Gray images load as 1 channel, color as 3 (alpha, if present, is
/// dropped). 16-bit and float inputs are rejected rather than silently
/// requantized.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let dyn_img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    use image::DynamicImage::*;
    let (h, w) = (dyn_img.height() as usize, dyn_img.width() as usize);
    match dyn_img {
        ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageTensor::new(h, w, 1, data)
        }
        ImageLumaA8(buf) => {
            let data = buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            ImageTensor::new(h, w, 1, data)
        }
        ImageRgb8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageTensor::new(h, w, 3, data)
        }
        ImageRgba8(buf) => {
            let mut data = Vec::with_capacity(h * w * 3);
            for p in buf.pixels() {
                data.extend([p.0[0], p.0[1], p.0[2]].map(|v| v as f64 / 255.0));
            }
            ImageTensor::new(h, w, 3, data)
        }
        _ => Err(Error::Format(format!(
            "{}: only 8-bit gray/RGB rasters are supported",
            path.display()
        ))),
    }
}

/// Writes an 8-bit PNG; elements are clamped then rounded to the nearest
/// of the 256 levels, so a reload differs by at most 1/510 per element.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    let map_err = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    match img.channels {
        1 => {
            let raw: Vec<u8> = img.data.iter().map(|&v| q(v)).collect();
            let buf = image::GrayImage::from_raw(w, h, raw).expect("raw buffer sized to image");
            buf.save(path).map_err(map_err)
        }
        3 => {
            let raw: Vec<u8> = img.data.iter().map(|&v| q(v)).collect();
            let buf = image::RgbImage::from_raw(w, h, raw).expect("raw buffer sized to image");
            buf.save(path).map_err(map_err)
        }
        _ => unreachable!("ImageTensor invariant: channels in {{1,3}}"),
    }
}
