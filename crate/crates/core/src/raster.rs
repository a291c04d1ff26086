//! Floating-point RGB rasters and PNG conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Patch;

/// Row-major RGB image with interleaved channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{} values do not form a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage {
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies a `size × size` square whose top-left corner is `(x0, y0)`.
    pub fn crop_square(&self, x0: usize, y0: usize, size: usize) -> Result<Vec<f32>> {
        if x0 + size > self.width || y0 + size > self.height {
            return Err(Error::shape(format!(
                "{size}px square at ({x0}, {y0}) exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(size * size * 3);
        for y in y0..y0 + size {
            let row = (y * self.width + x0) * 3;
            out.extend_from_slice(&self.data[row..row + size * 3]);
        }
        Ok(out)
    }

    /// Pastes a square patch with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, patch: &Patch, x0: usize, y0: usize) {
        let n = patch.size();
        for y in 0..n.min(self.height.saturating_sub(y0)) {
            let w = n.min(self.width.saturating_sub(x0));
            let dst = ((y0 + y) * self.width + x0) * 3;
            self.data[dst..dst + w * 3].copy_from_slice(&patch.pixels()[y * n * 3..(y * n + w) * 3]);
        }
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<RgbImage> {
        if self.width == 0 || self.height == 0 || width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "cannot resize {}x{} to {width}x{height}",
                self.width, self.height
            )));
        }
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
            let scale = src as f64 / dst as f64;
            (0..dst)
                .map(|i| {
                    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let i0 = pos.floor() as usize;
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, (pos - i0 as f64) as f32)
                })
                .collect()
        };
        let xs = axis(width, self.width);
        let ys = axis(height, self.height);
        let mut out = Vec::with_capacity(width * height * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                for ch in 0..3 {
                    let top = a[ch] + (b[ch] - a[ch]) * fx;
                    let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                    out.push(top + (bottom - top) * fy);
                }
            }
        }
        RgbImage::new(width, height, out)
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: None,
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    fn from_rgb8(img: &image::RgbImage) -> RgbImage {
        RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|v| *v as f32 / 255.0).collect(),
        }
    }

    fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|v| quantize(*v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length checked on construction")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: Some(path.to_path_buf()),
            message: e.to_string(),
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: None,
                message: e.to_string(),
            })?;
        Ok(buf.into_inner())
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Patch pixels as an image.
pub fn patch_image(p: &Patch) -> RgbImage {
    RgbImage {
        width: p.size(),
        height: p.size(),
        data: p.pixels().to_vec(),
    }
}
