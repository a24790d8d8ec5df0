//! 8-bit PNG images mapped linearly to `[0, 1]`, one vector per channel in
//! raster order.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{DynamicImage, GrayImage, RgbImage};
use nalgebra::DVector;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// One entry for grayscale, three for RGB.
    pub channels: Vec<DVector<f64>>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: Vec<DVector<f64>>) -> Result<Self> {
        if !(channels.len() == 1 || channels.len() == 3) {
            bail!("images have 1 or 3 channels, got {}", channels.len());
        }
        if let Some(c) = channels.iter().find(|c| c.len() != width * height) {
            bail!("channel of length {} does not fit a {width}x{height} image", c.len());
        }
        Ok(Self {
            width,
            height,
            channels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path).with_context(|| format!("cannot read image {}", path.display()))?;
    decode(img).with_context(|| format!("unsupported image {}", path.display()))
}

fn decode(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let to_unit = |v: u8| v as f64 / 255.0;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            Image::new(w, h, vec![DVector::from_iterator(w * h, g.pixels().map(|p| to_unit(p.0[0])))])
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            let channels = (0..3)
                .map(|c| DVector::from_iterator(w * h, rgb.pixels().map(|p| to_unit(p.0[c]))))
                .collect();
            Image::new(w, h, channels)
        }
        other => bail!("only 8-bit grayscale or RGB PNGs are supported, got {:?}", other.color()),
    }
}

/// `[0, 1] -> 0..=255`, clamping and rounding half to even.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    (v * 255.0).round_ties_even() as u8
}

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let (w, h) = (image.width as u32, image.height as u32);
    let result = match image.channels.len() {
        1 => GrayImage::from_fn(w, h, |x, y| {
            image::Luma([quantize(image.channels[0][(y * w + x) as usize])])
        })
        .save(path),
        _ => RgbImage::from_fn(w, h, |x, y| {
            let i = (y * w + x) as usize;
            image::Rgb([
                quantize(image.channels[0][i]),
                quantize(image.channels[1][i]),
                quantize(image.channels[2][i]),
            ])
        })
        .save(path),
    };
    result.with_context(|| format!("cannot write image {}", path.display()))
}
