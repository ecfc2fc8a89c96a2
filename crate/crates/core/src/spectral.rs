//! Radix-2 2D discrete Fourier transform and magnitude features.
//!
//! Forward transforms use the `exp(-2πi·kn/N)` kernel without normalization;
//! the inverse carries the `1/(W·H)` factor.

use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::imgproc::GrayImage;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn from_real(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(alloc::format!(
                "{}x{} grid needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        let data = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> Complex64 {
        self.data[y * self.width + x]
    }
}

/// Real-valued grid, e.g. a magnitude spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

fn check_pow2(width: usize, height: usize) -> Result<()> {
    if !width.is_power_of_two() || !height.is_power_of_two() {
        return Err(Error::Dimension(alloc::format!(
            "radix-2 transform needs power-of-two sides, got {width}x{height}"
        )));
    }
    Ok(())
}

/// In-place iterative radix-2 transform. `inverse` flips the kernel sign but
/// does not normalize.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        // Twiddles are evaluated directly rather than by recurrence.
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| {
                let angle = sign * core::f64::consts::TAU * k as f64 / len as f64;
                Complex64::new(libm::cos(angle), libm::sin(angle))
            })
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn transform_2d(grid: &mut ComplexGrid, inverse: bool) {
    let (w, h) = (grid.width, grid.height);
    for row in grid.data.chunks_exact_mut(w) {
        fft_in_place(row, inverse);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = grid.data[y * w + x];
        }
        fft_in_place(&mut column, inverse);
        for y in 0..h {
            grid.data[y * w + x] = column[y];
        }
    }
}

/// Forward 2D transform of a complex grid: rows first, then columns.
pub fn fft2d_grid(grid: &ComplexGrid) -> Result<ComplexGrid> {
    check_pow2(grid.width, grid.height)?;
    let mut out = grid.clone();
    transform_2d(&mut out, false);
    Ok(out)
}

/// Forward 2D transform of an image. Sides must be powers of two; see
/// [`pad_to_pow2`].
pub fn fft2d(img: &GrayImage) -> Result<ComplexGrid> {
    let mut grid = ComplexGrid::from_real(img.width(), img.height(), img.data())?;
    check_pow2(grid.width, grid.height)?;
    transform_2d(&mut grid, false);
    Ok(grid)
}

/// Inverse 2D transform with `1/(W·H)` normalization.
pub fn ifft2d(grid: &ComplexGrid) -> Result<ComplexGrid> {
    check_pow2(grid.width, grid.height)?;
    let mut out = grid.clone();
    transform_2d(&mut out, true);
    let scale = 1.0 / (grid.width * grid.height) as f64;
    for v in &mut out.data {
        *v *= scale;
    }
    Ok(out)
}

/// Zero-pads to the next power of two on each side, keeping the image in the
/// top-left corner.
pub fn pad_to_pow2(img: &GrayImage) -> GrayImage {
    let w = img.width().next_power_of_two();
    let h = img.height().next_power_of_two();
    if (w, h) == (img.width(), img.height()) {
        return img.clone();
    }
    GrayImage::from_fn(w, h, |x, y| {
        if x < img.width() && y < img.height() {
            img.get(x, y)
        } else {
            0.0
        }
    })
}

/// Per-bin modulus.
pub fn magnitude_spectrum(grid: &ComplexGrid) -> RealGrid {
    RealGrid {
        width: grid.width,
        height: grid.height,
        data: grid.data.iter().map(|c| c.norm()).collect(),
    }
}

/// Options for turning an image into a feature vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralOptions {
    /// Move the DC bin to the grid center.
    pub shift: bool,
    /// Compress magnitudes with `ln(1 + m)`.
    pub log: bool,
}

/// Swaps quadrants so the zero frequency sits at `(W/2, H/2)`.
pub fn fftshift(grid: &RealGrid) -> RealGrid {
    let (w, h) = (grid.width, grid.height);
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            data[((y + h / 2) % h) * w + (x + w / 2) % w] = grid.data[y * w + x];
        }
    }
    RealGrid { width: w, height: h, data }
}

/// Pads, transforms and unrolls the magnitude spectrum of `img` into one
/// row-major feature vector.
pub fn spectral_features(img: &GrayImage, opts: SpectralOptions) -> Vec<f64> {
    let padded = pad_to_pow2(img);
    let spectrum = fft2d(&padded).expect("padded to powers of two");
    let mut mag = magnitude_spectrum(&spectrum);
    if opts.shift {
        mag = fftshift(&mag);
    }
    if opts.log {
        for v in &mut mag.data {
            *v = libm::log1p(*v);
        }
    }
    mag.data
}
