//! Plain pixel containers shared by the dataset, metrics and inference code.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage, Rgba, RgbaImage};

use crate::error::{Error, Result};

/// Row-major RGB image with unit-interval intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3`, interleaved RGB.
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Binarize a grayscale image at half intensity.
    pub fn from_gray8(img: &GrayImage) -> Self {
        Mask {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v >= 128).collect(),
        }
    }

    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_gray8(&img))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path)?;
        Ok(())
    }

    /// Downsample to `side x side` by area coverage: a cell is foreground
    /// when strictly more than half of the source pixels it covers are set.
    pub fn downsample_area(&self, side: usize) -> Result<Mask> {
        if self.height == side && self.width == side {
            return Ok(self.clone());
        }
        if self.height % side != 0 || self.width % side != 0 {
            return Err(Error::Shape(format!(
                "cannot area-downsample {}x{} mask to {side}x{side}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / side, self.width / side);
        let mut out = Mask::empty(side, side);
        for y in 0..side {
            for x in 0..side {
                let mut n = 0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        n += usize::from(self.get(y * fy + dy, x * fx + dx));
                    }
                }
                out.set(y, x, 2 * n > fy * fx);
            }
        }
        Ok(out)
    }
}

/// Real-valued square grid, row-major. Used for saliency logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                let top = self.get(y0, x0) * (1.0 - wx) + self.get(y0, x1) * wx;
                let bot = self.get(y1, x0) * (1.0 - wx) + self.get(y1, x1) * wx;
                data.push(top * (1.0 - wy) + bot * wy);
            }
        }
        Grid { height, width, data }
    }

    /// Strict `>` threshold; ties fall to background.
    pub fn threshold(&self, tau: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f64::from(v) > tau).collect(),
        }
    }

    /// Min-max scale into the full 16-bit range. A constant grid maps to 0.
    pub fn to_gray16(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        let raw = self
            .data
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    (((v - lo) / span) * 65535.0).round() as u16
                } else {
                    0
                }
            })
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

/// Tint mask pixels red over the image; alpha is opaque everywhere.
pub fn overlay(image: &Image, mask: &Mask) -> Result<RgbaImage> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::Shape(format!(
            "overlay image {}x{} vs mask {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let rgb = image.to_rgb8();
    let mut out = RgbaImage::new(image.width as u32, image.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let Rgb([r, g, b]) = *rgb.get_pixel(x, y);
        *px = if mask.get(y as usize, x as usize) {
            let blend = |c: u8, t: u8| ((u16::from(c) + u16::from(t)) / 2) as u8;
            Rgba([blend(r, 255), blend(g, 0), blend(b, 0), 255])
        } else {
            Rgba([r, g, b, 255])
        };
    }
    Ok(out)
}
