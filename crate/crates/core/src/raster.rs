//! Single-channel rasters and the resampling helpers the pipeline needs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CoordTransform, Point};

/// Grayscale image with intensities in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    spacing_mm: Option<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            spacing_mm: None,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
            spacing_mm: None,
        }
    }

    /// Builds an image from a function of pixel coordinates; values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut img = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                img.pixels[y * width + x] = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            }
        }
        img
    }

    pub fn with_spacing(mut self, spacing_mm: f64) -> Result<Self> {
        if !(spacing_mm > 0.0) || !spacing_mm.is_finite() {
            return Err(Error::InvalidArgument(format!("spacing must be > 0, got {spacing_mm}")));
        }
        self.spacing_mm = Some(spacing_mm);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> Option<f64> {
        self.spacing_mm
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at a continuous position; zero outside the image.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.pixels[yi as usize * self.width + xi as usize]
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear sample with coordinates clamped to the image (edge replication).
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.sample(x, y)
    }

    /// Resamples so that output pixel `(u, v)` takes the value at source
    /// position `(u * scale + offset, v * scale + offset)` with
    /// `offset = (scale - 1) / 2` (pixel-center alignment).
    pub fn resample(&self, out_width: usize, out_height: usize, scale: f64) -> ImageGrid {
        let offset = (scale - 1.0) / 2.0;
        let mut out = ImageGrid::zeros(out_width, out_height);
        for v in 0..out_height {
            let sy = v as f64 * scale + offset;
            for u in 0..out_width {
                let sx = u as f64 * scale + offset;
                out.pixels[v * out_width + u] = self.sample_clamped(sx, sy).clamp(0.0, 1.0);
            }
        }
        out.spacing_mm = self.spacing_mm.map(|s| s * scale);
        out
    }

    /// Copies a `width x height` window whose top-left corner is `(x0, y0)`;
    /// cells outside the source are zero.
    pub fn window(&self, x0: i64, y0: i64, width: usize, height: usize) -> ImageGrid {
        let mut out = ImageGrid::zeros(width, height);
        for v in 0..height {
            let sy = y0 + v as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for u in 0..width {
                let sx = x0 + u as i64;
                if sx < 0 || sx >= self.width as i64 {
                    continue;
                }
                out.pixels[v * width + u] = self.pixels[sy as usize * self.width + sx as usize];
            }
        }
        out.spacing_mm = self.spacing_mm;
        out
    }

    /// Mean and variance of the `size x size` patch at `(x0, y0)`, restricted to the image.
    pub fn patch_stats(&self, x0: usize, y0: usize, size: usize) -> (f64, f64) {
        let x1 = (x0 + size).min(self.width);
        let y1 = (y0 + size).min(self.height);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let v = self.pixels[y * self.width + x];
                sum += v;
                sum_sq += v * v;
                n += 1;
            }
        }
        if n == 0 {
            return (0.0, 0.0);
        }
        let mean = sum / n as f64;
        (mean, (sum_sq / n as f64 - mean * mean).max(0.0))
    }

    /// SHA-256 over dimensions and raw pixel bits.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        for v in &self.pixels {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    /// Loads an 8- or 16-bit image file as grayscale in `[0, 1]`.
    pub fn load(path: &Path) -> Result<ImageGrid> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::parse(path, other.to_string()),
        })?;
        let luma = img.into_luma16();
        let (w, h) = luma.dimensions();
        let pixels = luma.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
        ImageGrid::new(w as usize, h as usize, pixels)
    }

    /// Saves as a 16-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Format("pixel buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
    }
}

/// Resizes so that the short side equals `target` (aspect preserved, long side
/// rounded to nearest). Returns the resized image and the transform mapping
/// resized pixel coordinates back to the original frame.
pub fn downsample_short_side(img: &ImageGrid, target: usize) -> (ImageGrid, CoordTransform) {
    let short = img.width().min(img.height());
    if short == target {
        return (img.clone(), CoordTransform::identity());
    }
    let scale = short as f64 / target as f64;
    let resize = |n: usize| -> usize {
        if n == short {
            target
        } else {
            ((n as f64 / scale) + 0.5).floor().max(1.0) as usize
        }
    };
    let (w, h) = (resize(img.width()), resize(img.height()));
    let offset = (scale - 1.0) / 2.0;
    let t = CoordTransform {
        scale,
        dx: offset,
        dy: offset,
    };
    (img.resample(w, h, scale), t)
}

/// Top-left pixel of the `size x size` window centered on `center` and
/// shifted to stay inside a `width x height` image (or at 0 when the image is
/// smaller than the window).
pub(crate) fn crop_origin(center: Point, size: usize, width: usize, height: usize) -> (i64, i64) {
    let half = (size as f64 - 1.0) / 2.0;
    let origin = |c: f64, extent: usize| -> i64 {
        let max = extent.saturating_sub(size) as i64;
        let o = (c - half + 0.5).floor();
        if !(o > 0.0) {
            0
        } else {
            (o as i64).min(max)
        }
    };
    (origin(center.x, width), origin(center.y, height))
}

/// Cuts a `size x size` window centered on `center` (original pixels), shifted
/// to stay inside the image. Images smaller than `size` are zero-padded on the
/// right/bottom first. The transform maps crop pixels to original pixels.
pub fn crop_local_region(img: &ImageGrid, center: Point, size: usize) -> (ImageGrid, CoordTransform) {
    let (ox, oy) = crop_origin(center, size, img.width(), img.height());
    (img.window(ox, oy, size, size), CoordTransform::translation(ox as f64, oy as f64))
}
