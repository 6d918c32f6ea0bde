//! RGB images with unit-interval `f32` intensities, stored row-major HWC.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
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

    /// Bilinear sample at a continuous pixel position (pixel centers on
    /// integers), clamping to the border.
    pub fn sample(&self, x: f32, y: f32) -> [f32; 3] {
        let mut out = [0.0; 3];
        sample_bilinear(&self.data, self.width, self.height, 3, x, y, &mut out);
        out
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len().max(1) as f32
    }

    /// Bilinear resize with half-pixel alignment. Downscaling by more than
    /// 2x box-filters first to limit aliasing.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut src = self.clone();
        while src.width >= 2 * width && src.height >= 2 * height {
            src = src.box_halve();
        }
        if width == src.width && height == src.height {
            return src;
        }
        let mut out = Image::new(width, height);
        let sx = src.width as f32 / width as f32;
        let sy = src.height as f32 / height as f32;
        let mut px = [0.0; 3];
        for y in 0..height {
            let fy = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..width {
                let fx = (x as f32 + 0.5) * sx - 0.5;
                sample_bilinear(&src.data, src.width, src.height, 3, fx, fy, &mut px);
                out.set(x, y, px);
            }
        }
        out
    }

    fn box_halve(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let p = self.get(2 * x + dx, 2 * y + dy);
                    for c in 0..3 {
                        acc[c] += 0.25 * p[c];
                    }
                }
                out.set(x, y, acc);
            }
        }
        out
    }

    /// Crops a `width x height` region whose top-left corner is at `(x0, y0)`
    /// (fractional allowed), bilinearly resampled to `out_w x out_h`.
    pub fn crop_resized(&self, x0: f32, y0: f32, width: f32, height: f32, out_w: usize, out_h: usize) -> Image {
        let mut out = Image::new(out_w, out_h);
        let sx = width / out_w as f32;
        let sy = height / out_h as f32;
        let mut px = [0.0; 3];
        for y in 0..out_h {
            let fy = y0 + (y as f32 + 0.5) * sy - 0.5;
            for x in 0..out_w {
                let fx = x0 + (x as f32 + 0.5) * sx - 0.5;
                sample_bilinear(&self.data, self.width, self.height, 3, fx, fy, &mut px);
                out.set(x, y, px);
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Image> {
        let rgb = image::open(path)?.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Image::from_vec(w as usize, h as usize, rgb.into_raw())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Side-by-side concatenation (same height required).
    pub fn hconcat(&self, other: &Image) -> Result<Image> {
        if self.height != other.height {
            return Err(Error::Dimension("hconcat needs equal heights".into()));
        }
        let mut out = Image::new(self.width + other.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(x, y));
            }
            for x in 0..other.width {
                out.set(self.width + x, y, other.get(x, y));
            }
        }
        Ok(out)
    }
}

/// Bilinear sampling of an interleaved `channels`-wide grid with border clamp.
#[inline]
pub fn sample_bilinear(data: &[f32], width: usize, height: usize, channels: usize, x: f32, y: f32, out: &mut [f32]) {
    let x = x.clamp(0.0, (width - 1) as f32);
    let y = y.clamp(0.0, (height - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = x - x0 as f32;
    let ay = y - y0 as f32;
    let w00 = (1.0 - ax) * (1.0 - ay);
    let w10 = ax * (1.0 - ay);
    let w01 = (1.0 - ax) * ay;
    let w11 = ax * ay;
    let i00 = (y0 * width + x0) * channels;
    let i10 = (y0 * width + x1) * channels;
    let i01 = (y1 * width + x0) * channels;
    let i11 = (y1 * width + x1) * channels;
    for c in 0..channels {
        out[c] = w00 * data[i00 + c] + w10 * data[i10 + c] + w01 * data[i01 + c] + w11 * data[i11 + c];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_on_integer_grid_is_exact() {
        let mut img = Image::new(4, 3);
        img.set(2, 1, [0.25, 0.5, 0.75]);
        assert_eq!(img.sample(2.0, 1.0), [0.25, 0.5, 0.75]);
        let half = img.sample(1.5, 1.0);
        assert!((half[1] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::filled(16, 16, [0.3, 0.6, 0.9]);
        assert_eq!(img.resize(16, 16), img);
        let small = img.resize(5, 7);
        assert!(small.data().iter().all(|v| [0.3f32, 0.6, 0.9].iter().any(|c| (v - c).abs() < 1e-6)));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(matches!(Image::from_vec(2, 2, vec![0.0; 11]), Err(Error::Dimension(_))));
    }
}
