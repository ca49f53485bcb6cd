//! 8-bit raster images (grayscale or RGB) in planar-free interleaved layout.

use std::path::Path;

use image::{imageops, DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB), interleaved.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return invalid(format!("unsupported channel count {channels}"));
        }
        if data.len() != width * height * channels {
            return invalid(format!("{} bytes for a {width}x{height}x{channels} raster", data.len()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    /// Reads PNG/PGM/PPM, converting to the requested channel count.
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Ok(Self::from_dynamic(img, channels))
    }

    fn from_dynamic(img: DynamicImage, channels: usize) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if channels == 3 {
            Self { width: w, height: h, channels: 3, data: img.into_rgb8().into_raw() }
        } else {
            Self { width: w, height: h, channels: 1, data: img.into_luma8().into_raw() }
        }
    }

    fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 3 {
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, self.data.clone()).expect("raster size"))
        } else {
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, self.data.clone()).expect("raster size"))
        }
    }

    /// Format chosen by extension (`.png`, `.pgm`, `.ppm`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let format = ImageFormat::from_path(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        self.to_dynamic()
            .save_with_format(path, format)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Bilinear resize; a no-op when the size already matches.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let img = self.to_dynamic().resize_exact(width as u32, height as u32, imageops::FilterType::Triangle);
        Self::from_dynamic(img, self.channels)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return invalid(format!("crop ({x0},{y0},{w},{h}) outside {}x{}", self.width, self.height));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        Ok(Self { width: w, height: h, channels: c, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        Self { data, ..*self }
    }

    /// Channel-planar values scaled to `[0, 1]`, shape `[channels, height, width]`.
    pub fn to_planar(&self) -> Vec<f32> {
        let (c, hw) = (self.channels, self.width * self.height);
        let mut out = vec![0.0f32; c * hw];
        for (i, px) in self.data.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * hw + i] = f32::from(v) / 255.0;
            }
        }
        out
    }
}
