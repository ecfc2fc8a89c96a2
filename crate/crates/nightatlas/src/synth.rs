//! Synthetic night-time city frames for dataset-free runs and tests.

use nightatlas_core::imgproc::RgbImage;
use nightatlas_core::rng::{derive, KeyedRng};
use serde::{Deserialize, Serialize};

pub const WIDTH: usize = 640;
pub const HEIGHT: usize = 426;

/// Label given to synthetic non-city frames.
pub const OTHER_LABEL: &str = "Other";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Seeds the lights and roads; frames sharing it show the same city.
    pub class_seed: u64,
    /// Seeds the sensor noise of one rendering.
    pub instance_seed: u64,
    pub blob_count: usize,
    pub road_count: usize,
    /// Range of blob standard deviations in pixels.
    pub blob_sigma: (f64, f64),
    /// Range of road half-widths in pixels.
    pub road_width: (f64, f64),
    pub noise_level: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(format!("noise_level {} not in [0, 1)", self.noise_level));
        }
        let (lo, hi) = self.blob_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(format!("blob sigma range ({lo}, {hi}) is invalid"));
        }
        let (lo, hi) = self.road_width;
        if !(lo > 0.0 && lo <= hi) {
            return Err(format!("road width range ({lo}, {hi}) is invalid"));
        }
        Ok(())
    }
}

fn add_blob(canvas: &mut [f64], cx: f64, cy: f64, sigma: f64, amp: f64) {
    let reach = 3.0 * sigma;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(WIDTH - 1);
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(HEIGHT - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        let dy = y as f64 - cy;
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            canvas[y * WIDTH + x] += amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

fn add_segment(canvas: &mut [f64], a: (f64, f64), b: (f64, f64), width: f64, amp: f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    let x0 = (a.0.min(b.0) - width).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + width).ceil() as usize).min(WIDTH - 1);
    let y0 = (a.1.min(b.1) - width).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + width).ceil() as usize).min(HEIGHT - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
            let (ex, ey) = (px - t * dx, py - t * dy);
            let d = (ex * ex + ey * ey).sqrt();
            if d < width {
                let v = &mut canvas[y * WIDTH + x];
                *v = v.max(amp * (1.0 - d / width));
            }
        }
    }
}

/// Renders a 640x426 frame: dark background, Gaussian light clusters,
/// polyline roads and additive sensor noise.
pub fn synth_city(spec: &SynthSpec) -> RgbImage {
    let mut canvas = vec![0.02; WIDTH * HEIGHT];
    let mut lights = KeyedRng::new(spec.class_seed, 1);
    let (w, h) = (WIDTH as f64, HEIGHT as f64);
    for _ in 0..spec.blob_count {
        let cx = lights.uniform(0.2 * w, 0.8 * w);
        let cy = lights.uniform(0.15 * h, 0.85 * h);
        let sigma = lights.uniform(spec.blob_sigma.0, spec.blob_sigma.1);
        let amp = lights.uniform(0.4, 1.0);
        add_blob(&mut canvas, cx, cy, sigma, amp);
    }
    let mut roads = KeyedRng::new(spec.class_seed, 2);
    for _ in 0..spec.road_count {
        let vertices = 3 + roads.below(4);
        let width = roads.uniform(spec.road_width.0, spec.road_width.1);
        let amp = roads.uniform(0.35, 0.7);
        let mut prev = (roads.uniform(0.2 * w, 0.8 * w), roads.uniform(0.1 * h, 0.9 * h));
        for _ in 1..vertices {
            let next = (roads.uniform(0.2 * w, 0.8 * w), roads.uniform(0.1 * h, 0.9 * h));
            add_segment(&mut canvas, prev, next, width, amp);
            prev = next;
        }
    }
    let mut noise = KeyedRng::new(spec.instance_seed, 3);
    let data = canvas
        .iter()
        .flat_map(|&v| {
            let v = (v + spec.noise_level * noise.unit()).clamp(0.0, 1.0);
            [v, 0.8 * v, 0.45 * v]
        })
        .collect();
    RgbImage::new(WIDTH, HEIGHT, data).expect("canvas matches frame size")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub id: String,
    pub label: String,
    /// The single reference frame of its class.
    pub reference: bool,
    pub image: RgbImage,
}

pub fn class_name(class: usize) -> String {
    format!("city{class}")
}

/// Structure of synthetic city `class`. Classes cycle through three
/// families: a few large clusters, many small lights, and a network of wide
/// roads.
pub fn class_spec(seed: u64, class: usize, instance: u64) -> SynthSpec {
    let class_seed = derive(seed, class as u64);
    let (blob_count, road_count, blob_sigma, road_width) = match class % 3 {
        0 => (6, 1, (25.0, 45.0), (1.5, 3.5)),
        1 => (40, 0, (4.0, 10.0), (1.5, 3.5)),
        _ => (2, 7, (8.0, 16.0), (5.0, 8.0)),
    };
    SynthSpec {
        class_seed,
        instance_seed: derive(class_seed, instance),
        blob_count,
        road_count,
        blob_sigma,
        road_width,
        noise_level: 0.05,
    }
}

/// `per_class` frames for each of `class_count` cities. The first frame of
/// each class is its reference; the rest re-render the same structure with
/// fresh noise.
pub fn synth_dataset(class_count: usize, per_class: usize, seed: u64) -> Vec<SynthItem> {
    let mut items = Vec::with_capacity(class_count * per_class);
    for c in 0..class_count {
        for i in 0..per_class {
            items.push(SynthItem {
                id: format!("{}_{i:03}", class_name(c)),
                label: class_name(c),
                reference: i == 0,
                image: synth_city(&class_spec(seed, c, i as u64)),
            });
        }
    }
    items
}

/// Sparse countryside frames with scattered small lights, labelled Other.
pub fn synth_others(count: usize, seed: u64) -> Vec<SynthItem> {
    let base = derive(seed, 0x07AE);
    (0..count)
        .map(|i| {
            let class_seed = derive(base, i as u64);
            let mut r = KeyedRng::new(class_seed, 0);
            let spec = SynthSpec {
                class_seed,
                instance_seed: derive(class_seed, 1),
                blob_count: r.below(5),
                road_count: r.below(2),
                blob_sigma: (2.0, 6.0),
                road_width: (1.5, 3.5),
                noise_level: 0.05,
            };
            SynthItem { id: format!("other_{i:04}"), label: OTHER_LABEL.into(), reference: false, image: synth_city(&spec) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(a: &RgbImage, b: &RgbImage) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn noiseless_render_is_pure_function() {
        let spec = SynthSpec { noise_level: 0.0, ..class_spec(4, 0, 0) };
        let other = SynthSpec { instance_seed: 99, ..spec };
        assert_eq!(synth_city(&spec), synth_city(&other));
    }

    #[test]
    fn empty_scene_is_noise_floor() {
        let spec = SynthSpec { blob_count: 0, road_count: 0, noise_level: 0.1, ..class_spec(1, 0, 0) };
        let img = synth_city(&spec);
        assert!(img.data().chunks(3).all(|p| (0.02..=0.12).contains(&p[0])));
    }

    #[test]
    fn classes_differ_more_than_repeat_shots() {
        let items = synth_dataset(3, 2, 7);
        let intra = (0..3).map(|c| l2(&items[2 * c].image, &items[2 * c + 1].image)).fold(0.0, f64::max);
        for a in 0..3 {
            for b in a + 1..3 {
                let inter = l2(&items[2 * a].image, &items[2 * b].image);
                assert!(inter > 2.0 * intra, "classes {a},{b}: {inter} vs {intra}");
            }
        }
    }

    #[test]
    fn dataset_bookkeeping() {
        let items = synth_dataset(3, 10, 1);
        assert_eq!(items.len(), 30);
        assert_eq!(items.iter().filter(|i| i.reference).count(), 3);
        assert_eq!(items, synth_dataset(3, 10, 1));
        assert_eq!(synth_others(4, 1).len(), 4);
    }
}
