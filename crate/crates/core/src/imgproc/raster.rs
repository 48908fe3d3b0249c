use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Row-major 8-bit raster with one (gray) or three (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_gray_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Pixel lookup with coordinates clamped to the border (replicate policy).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> u8 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    /// Extracts one channel as a gray image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// BT.601 luma; gray images are returned unchanged.
    pub fn to_gray(&self) -> Image {
        if self.is_gray() {
            return self.clone();
        }
        let data = self.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Copies the rectangle `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Image> {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!("empty crop [{x0},{x1})x[{y0},{y1})")));
        }
        let w = x1 - x0;
        let mut data = Vec::with_capacity(w * (y1 - y0) * self.channels);
        for y in y0..y1 {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Image::new(w, y1 - y0, self.channels, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Reads PNG, PGM (P5) or PPM (P6); the format is sniffed from the content.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let format = image::guess_format(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let dynamic = image::load_from_memory_with_format(&bytes, format)?;
        Ok(Image::from_dynamic(dynamic))
    }

    /// Writes by extension: `.png`, `.pgm` (gray only) or `.ppm` (RGB only).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        let format = match ext.as_str() {
            "png" => ImageFormat::Png,
            "pgm" | "ppm" | "pnm" => ImageFormat::Pnm,
            other => return Err(Error::format(path, format!("unsupported image extension `{other}`"))),
        };
        let img = match (ext.as_str(), self.channels) {
            ("pgm", 3) => self.to_gray(),
            ("ppm", 1) => self.to_rgb(),
            _ => self.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        img.to_dynamic().save_with_format(path, format)?;
        Ok(())
    }

    pub fn to_rgb(&self) -> Image {
        if !self.is_gray() {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    fn from_dynamic(dynamic: DynamicImage) -> Image {
        match dynamic {
            DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Image {
                    width: w as usize,
                    height: h as usize,
                    channels: 1,
                    data: g.into_raw(),
                }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Image {
                    width: w as usize,
                    height: h as usize,
                    channels: 3,
                    data: rgb.into_raw(),
                }
            }
        }
    }

    fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.is_gray() {
            DynamicImage::ImageLuma8(
                GrayImage::from_raw(w, h, self.data.clone()).expect("length checked at construction"),
            )
        } else {
            DynamicImage::ImageRgb8(
                RgbImage::from_raw(w, h, self.data.clone()).expect("length checked at construction"),
            )
        }
    }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Rounds half up and clamps into the 8-bit range.
#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_channels() {
        assert!(Image::new(2, 2, 1, vec![0; 3]).is_err());
        assert!(Image::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn crop_clips_to_bounds() {
        let img = Image::from_gray_fn(4, 3, |x, y| (x + 10 * y) as u8).unwrap();
        let c = img.crop(2, 1, 10, 10).unwrap();
        assert_eq!((c.width(), c.height()), (2, 2));
        assert_eq!(c.data(), &[12, 13, 22, 23]);
        assert!(img.crop(4, 0, 5, 1).is_err());
    }

    #[test]
    fn png_and_pnm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let gray = Image::from_gray_fn(5, 4, |x, y| (x * 40 + y) as u8).unwrap();
        let rgb = Image::new(2, 1, 3, vec![1, 2, 3, 250, 251, 252]).unwrap();
        for (img, name) in [(&gray, "a.png"), (&gray, "a.pgm"), (&rgb, "b.png"), (&rgb, "b.ppm")] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            assert_eq!(&Image::load(&p).unwrap(), img, "{name}");
        }
    }
}
