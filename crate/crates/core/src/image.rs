//! Dense real-valued images, channel-last, row-major.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let o = self.offset(y, x, c);
        self.data[o] = v;
    }

    #[inline]
    pub fn add_at(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let o = self.offset(y, x, c);
        self.data[o] += v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN or infinity")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination; shapes must agree.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    fn with_data(&self, data: Vec<f64>) -> Image {
        debug_assert_eq!(data.len(), self.data.len());
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn scale(&self, k: f64) -> Image {
        self.map(|v| v * k)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "mean_abs_diff")?;
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(total / self.data.len().max(1) as f64)
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other, "mse")?;
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(total / self.data.len().max(1) as f64)
    }

    /// PSNR in dB for images in `[-1, 1]` (peak-to-peak range 2).
    pub fn psnr(&self, other: &Image) -> Result<f64> {
        let mse = self.mse(other)?;
        Ok(10.0 * (4.0 / mse).log10())
    }

    pub fn axpy(&mut self, a: f64, x: &Image) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (d, s) in self.data.iter_mut().zip(&x.data) {
            *d += a * s;
        }
        Ok(())
    }

    /// Copy of the `h`×`w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::dim(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in top..top + h {
            let start = self.offset(y, left, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Image {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    /// Central `h`×`w` window. Margins must be even so the window is centered.
    pub fn crop_center(&self, h: usize, w: usize) -> Result<Image> {
        let (top, left) = self.center_origin(h, w)?;
        self.crop(top, left, h, w)
    }

    pub(crate) fn center_origin(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h > self.height || w > self.width {
            return Err(Error::dim(format!(
                "window {h}x{w} larger than {}x{}",
                self.height, self.width
            )));
        }
        let (dy, dx) = (self.height - h, self.width - w);
        if dy % 2 != 0 || dx % 2 != 0 {
            return Err(Error::dim(format!(
                "window {h}x{w} cannot be centered in {}x{}",
                self.height, self.width
            )));
        }
        Ok((dy / 2, dx / 2))
    }

    /// Overwrite the central region with `patch`.
    pub fn paste_center(&mut self, patch: &Image) -> Result<()> {
        if patch.channels != self.channels {
            return Err(Error::dim("paste_center: channel mismatch"));
        }
        let (top, left) = self.center_origin(patch.height, patch.width)?;
        let c = self.channels;
        for y in 0..patch.height {
            let dst = self.offset(top + y, left, 0);
            let src = patch.offset(y, 0, 0);
            self.data[dst..dst + patch.width * c]
                .copy_from_slice(&patch.data[src..src + patch.width * c]);
        }
        Ok(())
    }

    /// `patch` centered in an otherwise zero `height`×`width` image.
    pub fn pad_center(patch: &Image, height: usize, width: usize) -> Result<Image> {
        let mut out = Image::zeros(height, width, patch.channels);
        out.paste_center(patch)?;
        Ok(out)
    }

    /// Bilinear resize with pixel-center alignment and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Image {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        self.sample_affine(height, width, |y| (y + 0.5) * sy - 0.5, |x| (x + 0.5) * sx - 0.5)
    }

    /// Bilinear sample of an axis-aligned map from output to source coordinates.
    pub(crate) fn sample_affine(
        &self,
        height: usize,
        width: usize,
        src_y: impl Fn(f64) -> f64,
        src_x: impl Fn(f64) -> f64,
    ) -> Image {
        let c = self.channels;
        let xs: Vec<(usize, usize, f64)> = (0..width)
            .map(|x| lerp_taps(src_x(x as f64), self.width))
            .collect();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let (y0, y1, fy) = lerp_taps(src_y(y as f64), self.height);
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let a = self.get(y0, x0, ch);
                    let b = self.get(y0, x1, ch);
                    let d = self.get(y1, x0, ch);
                    let e = self.get(y1, x1, ch);
                    let top = a + (b - a) * fx;
                    let bot = d + (e - d) * fx;
                    data.push(top + (bot - top) * fy);
                }
            }
        }
        Image {
            height,
            width,
            channels: c,
            data,
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&b| u8_to_unit(b)).collect();
        Image::from_vec(h as usize, w as usize, 3, data)
    }

    /// Write as 8-bit PNG, mapping `[-1, 1]` linearly onto `[0, 255]`.
    /// One channel is stored as grayscale, three as RGB.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| unit_to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::invalid(format!(
                    "PNG export supports 1 or 3 channels, got {c}"
                )))
            }
        };
        image::save_buffer(path.as_ref(), &bytes, w, h, color)?;
        Ok(())
    }
}

#[inline]
fn lerp_taps(s: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let s = s.clamp(0.0, max);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

pub fn u8_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn unit_to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
