//! Image file IO. Pixels are stored as `[0, 1]` floats in memory and as
//! 8-bit samples on disk.

use std::path::Path;

use anyhow::{Context, Result};
use image::{ImageBuffer, Luma, Rgb};
use nightatlas_core::imgproc::{GrayImage, RgbImage};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Reads any supported file (PNG, JPEG, PNM) as RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(RgbImage::new(w as usize, h as usize, data)?)
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(GrayImage::new(w as usize, h as usize, data)?)
}

pub fn gray_bytes(img: &GrayImage) -> Vec<u8> {
    img.data().iter().map(|&v| to_byte(v)).collect()
}

/// Writes an 8-bit image; the format follows the extension (`.png`, `.pgm`).
pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, gray_bytes(img)).expect("buffer size");
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = img.data().iter().map(|&v| to_byte(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, bytes).expect("buffer size");
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}
