//! Pixel-level image mathematics.
//!
//! Intensities are `f64` in `[0, 1]`, stored row-major. Every operation is a
//! pure function of its inputs.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Wraps row-major data. Fails if the length does not match or any value
    /// falls outside `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(alloc::format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dimension(alloc::format!(
                "intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        let value = value.clamp(0.0, 1.0);
        Self { width, height, data: vec![value; width * height] }
    }

    /// Builds an image from `f(x, y)`, clamping the result into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Fraction of exactly-zero pixels.
    pub fn sparsity(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.zero_count() as f64 / self.data.len() as f64
    }

    pub fn zero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0.0).count()
    }
}

/// Three-channel image, row-major `(r, g, b)` triples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Dimension(alloc::format!(
                "{}x{} rgb image needs {} values, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Dimension(alloc::format!(
                "channel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|c| c.clamp(0.0, 1.0)));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Statistic used to pick the threshold below which pixels are zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMethod {
    Mean,
    Median,
    P25,
    None,
}

/// Zero-pixel accounting for one thresholding pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    /// Threshold on the 8-bit scale, `round(T * 255)`.
    pub threshold_value: u8,
    pub zeros_before: usize,
    pub zeros_added: usize,
    pub total_zeros: usize,
    pub sparsity: f64,
}

impl ThresholdReport {
    /// Builds the report from zero counts and the pixel count.
    pub fn from_counts(
        threshold_value: u8,
        zeros_before: usize,
        zeros_added: usize,
        pixels: usize,
    ) -> Self {
        let total_zeros = zeros_before + zeros_added;
        let sparsity = if pixels == 0 { 0.0 } else { total_zeros as f64 / pixels as f64 };
        Self { threshold_value, zeros_before, zeros_added, total_zeros, sparsity }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub q_low: f64,
    pub q_high: f64,
    pub threshold_method: ThresholdMethod,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self { q_low: 0.2, q_high: 0.998, threshold_method: ThresholdMethod::Mean }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.q_low && self.q_low < self.q_high && self.q_high <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "quantiles must satisfy 0 <= q_low < q_high <= 1, got ({}, {})",
                self.q_low,
                self.q_high
            )));
        }
        Ok(())
    }
}

/// One sampled transformation. Angles are in degrees for rotation and
/// radians for shear; shifts are fractions of the image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub shift_x_frac: f64,
    pub shift_y_frac: f64,
    pub shear: f64,
    pub zoom: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineParams {
    pub const fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shift_x_frac: 0.0,
            shift_y_frac: 0.0,
            shear: 0.0,
            zoom: 1.0,
            flip_h: false,
            flip_v: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("rotation_deg", self.rotation_deg, -180.0, 180.0),
            ("shift_x_frac", self.shift_x_frac, -0.2, 0.2),
            ("shift_y_frac", self.shift_y_frac, -0.2, 0.2),
            ("shear", self.shear, -0.2, 0.2),
            ("zoom", self.zoom, 0.8, 1.2),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Config(alloc::format!("{name}={v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Forward map about the image center as `(matrix, translation)`:
    /// `q = A p + t` with `A = zoom * shear * rotation * flip`.
    fn forward(&self, width: usize, height: usize) -> ([[f64; 2]; 2], [f64; 2]) {
        let fx = if self.flip_h { -1.0 } else { 1.0 };
        let fy = if self.flip_v { -1.0 } else { 1.0 };
        let theta = self.rotation_deg.to_radians();
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        let rf = [[c * fx, -s * fy], [s * fx, c * fy]];
        let (ss, cs) = (libm::sin(self.shear), libm::cos(self.shear));
        let sh = [[1.0, -ss], [0.0, cs]];
        let mut a = [[0.0; 2]; 2];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.zoom * (sh[i][0] * rf[0][j] + sh[i][1] * rf[1][j]);
            }
        }
        let t = [self.shift_x_frac * width as f64, self.shift_y_frac * height as f64];
        (a, t)
    }
}

/// Linear-interpolation quantile over the sorted values (the common
/// "type 7" estimator). `q` is clamped into `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted_quantile(&sorted, q)
}

fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// ITU-R BT.601 luma.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// Linear contrast stretch between the `q_low` and `q_high` quantiles.
/// A flat image (equal quantiles) maps to all zeros.
pub fn rescale_intensity(img: &GrayImage, q_low: f64, q_high: f64) -> GrayImage {
    if img.data.is_empty() {
        return img.clone();
    }
    let mut sorted = img.data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted_quantile(&sorted, q_low);
    let hi = sorted_quantile(&sorted, q_high);
    if hi <= lo {
        return GrayImage::zeros(img.width, img.height);
    }
    let span = hi - lo;
    let data = img.data.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// The threshold `T` that `method` picks for this image.
pub fn threshold_level(img: &GrayImage, method: ThresholdMethod) -> f64 {
    if img.data.is_empty() {
        return 0.0;
    }
    match method {
        ThresholdMethod::Mean => img.data.iter().sum::<f64>() / img.data.len() as f64,
        ThresholdMethod::Median => quantile(&img.data, 0.5),
        ThresholdMethod::P25 => quantile(&img.data, 0.25),
        ThresholdMethod::None => 0.0,
    }
}

/// Zeroes every pixel strictly below the image's own threshold statistic.
pub fn threshold_image(img: &GrayImage, method: ThresholdMethod) -> (GrayImage, ThresholdReport) {
    let t = threshold_level(img, method);
    let zeros_before = img.zero_count();
    let mut zeros_added = 0;
    let data = img
        .data
        .iter()
        .map(|&v| {
            if v < t {
                if v != 0.0 {
                    zeros_added += 1;
                }
                0.0
            } else {
                v
            }
        })
        .collect();
    let level = libm::round(t * 255.0).clamp(0.0, 255.0) as u8;
    let report = ThresholdReport::from_counts(level, zeros_before, zeros_added, img.data.len());
    (GrayImage { width: img.width, height: img.height, data }, report)
}

/// Bilinear sample where neighbours outside the image contribute zero.
#[inline]
fn sample_zero_fill(img: &GrayImage, x: f64, y: f64) -> f64 {
    let x0f = libm::floor(x);
    let y0f = libm::floor(y);
    let fx = x - x0f;
    let fy = y - y0f;
    let (w, h) = (img.width as i64, img.height as i64);
    let (x0, y0) = (x0f as i64, y0f as i64);
    if x0 < -1 || y0 < -1 || x0 >= w || y0 >= h {
        return 0.0;
    }
    let px = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            img.data[(yi * w + xi) as usize]
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps the image with the centre-anchored affine described by `p`.
///
/// The forward map applies flips, then rotation, shear, zoom and finally the
/// shift. Output pixels are pulled back through the inverse map and sampled
/// bilinearly; anything outside the source reads as zero.
pub fn affine_transform(img: &GrayImage, p: &AffineParams) -> GrayImage {
    let (a, t) = p.forward(img.width, img.height);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        let qy = y as f64 - cy - t[1];
        for x in 0..img.width {
            let qx = x as f64 - cx - t[0];
            let sx = inv[0][0] * qx + inv[0][1] * qy + cx;
            let sy = inv[1][0] * qx + inv[1][1] * qy + cy;
            data.push(sample_zero_fill(img, sx, sy).clamp(0.0, 1.0));
        }
    }
    GrayImage { width: img.width, height: img.height, data }
}

/// Centered crop; with an odd margin the extra pixel is taken from the
/// right/bottom edge.
pub fn center_crop(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w > img.width || out_h > img.height {
        return Err(Error::Dimension(alloc::format!(
            "cannot crop {}x{} to {}x{}",
            img.width,
            img.height,
            out_w,
            out_h
        )));
    }
    let x0 = (img.width - out_w) / 2;
    let y0 = (img.height - out_h) / 2;
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in y0..y0 + out_h {
        let row = y * img.width;
        data.extend_from_slice(&img.data[row + x0..row + x0 + out_w]);
    }
    Ok(GrayImage { width: out_w, height: out_h, data })
}

/// Bilinear resize with half-pixel centers: source coordinate is
/// `(i + 0.5) * scale - 0.5`, clamped to the image.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Dimension(alloc::format!(
            "resize target {out_w}x{out_h} must be non-empty"
        )));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::Dimension("cannot resize an empty image".into()));
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = libm::floor(s) as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(img.width, out_w);
    let ys = axis(img.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
            let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
            data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Ok(GrayImage { width: out_w, height: out_h, data })
}

/// Grayscale, quantile contrast stretch, then threshold. Returns the
/// threshold report alongside the image.
pub fn enhance_with_report(img: &RgbImage, cfg: &EnhanceConfig) -> Result<(GrayImage, ThresholdReport)> {
    cfg.validate()?;
    let gray = to_grayscale(img);
    let stretched = rescale_intensity(&gray, cfg.q_low, cfg.q_high);
    Ok(threshold_image(&stretched, cfg.threshold_method))
}

pub fn enhance(img: &RgbImage, cfg: &EnhanceConfig) -> Result<GrayImage> {
    enhance_with_report(img, cfg).map(|(g, _)| g)
}

/// Crop/resize/crop geometry that turns a raw frame into a network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub input_width: usize,
    pub input_height: usize,
    /// Side of the first, square center crop.
    pub crop: usize,
    /// Side after the bilinear resize.
    pub resize: usize,
    /// Side of the final center crop.
    pub output: usize,
}

impl Geometry {
    /// 640x426 -> 426x426 -> 256x256 -> 224x224.
    pub const STANDARD: Geometry =
        Geometry { input_width: 640, input_height: 426, crop: 426, resize: 256, output: 224 };

    /// Reduced geometry for quick runs: 640x426 -> 426x426 -> 73x73 -> 64x64.
    pub const DESK: Geometry =
        Geometry { input_width: 640, input_height: 426, crop: 426, resize: 73, output: 64 };

    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage> {
        if img.width != self.input_width || img.height != self.input_height {
            return Err(Error::Dimension(alloc::format!(
                "geometry expects {}x{} input, got {}x{}",
                self.input_width,
                self.input_height,
                img.width,
                img.height
            )));
        }
        let square = center_crop(img, self.crop, self.crop)?;
        let resized = resize_bilinear(&square, self.resize, self.resize)?;
        center_crop(&resized, self.output, self.output)
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// The standard 640x426 -> 224x224 pipeline.
pub fn geometry_pipeline(img: &GrayImage) -> Result<GrayImage> {
    Geometry::STANDARD.apply(img)
}
