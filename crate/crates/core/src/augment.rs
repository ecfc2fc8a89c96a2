//! Single-reference augmentation.
//!
//! A class is grown from one labelled frame: the frame is enhanced once, then
//! each variant warps it with parameters drawn from a stream keyed by
//! `(seed, variant index)` and runs it through the crop/resize geometry.
//! Because draws are keyed, variants can be rendered lazily, in any order and
//! on any thread, and still come out identical.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::imgproc::{self, AffineParams, EnhanceConfig, Geometry, GrayImage, RgbImage};
use crate::rng::{derive, hash_str, KeyedRng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_max_deg: f64,
    pub shift_max_frac: f64,
    pub shear_max: f64,
    pub zoom_max_frac: f64,
    pub allow_flip_h: bool,
    pub allow_flip_v: bool,
    pub enhance: EnhanceConfig,
    pub variants_per_image: usize,
    pub master_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_max_deg: 180.0,
            shift_max_frac: 0.2,
            shear_max: 0.2,
            zoom_max_frac: 0.2,
            allow_flip_h: true,
            allow_flip_v: true,
            enhance: EnhanceConfig::default(),
            variants_per_image: 100,
            master_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No warping at all: every variant is the enhanced, resized reference.
    pub fn identity(variants_per_image: usize) -> Self {
        Self {
            rotation_max_deg: 0.0,
            shift_max_frac: 0.0,
            shear_max: 0.0,
            zoom_max_frac: 0.0,
            allow_flip_h: false,
            allow_flip_v: false,
            variants_per_image,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let limits = [
            ("rotation_max_deg", self.rotation_max_deg, 180.0),
            ("shift_max_frac", self.shift_max_frac, 0.2),
            ("shear_max", self.shear_max, 0.2),
            ("zoom_max_frac", self.zoom_max_frac, 0.2),
        ];
        for (name, v, max) in limits {
            if !(0.0..=max).contains(&v) {
                return Err(Error::Config(alloc::format!("{name}={v} must lie in [0, {max}]")));
            }
        }
        if self.variants_per_image == 0 {
            return Err(Error::Config("variants_per_image must be at least 1".into()));
        }
        self.enhance.validate()
    }
}

/// Draws one parameter set from the stream keyed by `(seed, index)`.
///
/// Seven draws are always consumed in a fixed order, so disabling a field
/// never shifts the values of the others.
pub fn sample_params(seed: u64, index: u64, cfg: &AugmentConfig) -> AffineParams {
    let mut rng = KeyedRng::new(seed, index);
    let mut sym = |max: f64| {
        let v = rng.uniform(-max, max);
        if max == 0.0 {
            0.0
        } else {
            v
        }
    };
    let rotation_deg = sym(cfg.rotation_max_deg);
    let shift_x_frac = sym(cfg.shift_max_frac);
    let shift_y_frac = sym(cfg.shift_max_frac);
    let shear = sym(cfg.shear_max);
    let zoom = 1.0 + sym(cfg.zoom_max_frac);
    let flip_h = rng.coin() && cfg.allow_flip_h;
    let flip_v = rng.coin() && cfg.allow_flip_v;
    AffineParams { rotation_deg, shift_x_frac, shift_y_frac, shear, zoom, flip_h, flip_v }
}

/// Warps an already-enhanced frame and runs it through `geometry`.
pub fn render_variant(
    enhanced: &GrayImage,
    seed: u64,
    index: u64,
    cfg: &AugmentConfig,
    geometry: &Geometry,
) -> Result<GrayImage> {
    let params = sample_params(seed, index, cfg);
    geometry.apply(&imgproc::affine_transform(enhanced, &params))
}

/// Enhances `reference` once and renders `cfg.variants_per_image` variants
/// with the standard 224x224 geometry.
pub fn augment_reference(reference: &RgbImage, cfg: &AugmentConfig) -> Result<Vec<GrayImage>> {
    augment_reference_with(reference, cfg, &Geometry::STANDARD)
}

pub fn augment_reference_with(
    reference: &RgbImage,
    cfg: &AugmentConfig,
    geometry: &Geometry,
) -> Result<Vec<GrayImage>> {
    cfg.validate()?;
    check_frame(reference, geometry)?;
    let enhanced = imgproc::enhance(reference, &cfg.enhance)?;
    (0..cfg.variants_per_image as u64)
        .map(|i| render_variant(&enhanced, cfg.master_seed, i, cfg, geometry))
        .collect()
}

fn check_frame(img: &RgbImage, geometry: &Geometry) -> Result<()> {
    if img.width() != geometry.input_width || img.height() != geometry.input_height {
        return Err(Error::Dimension(alloc::format!(
            "reference must be {}x{}, got {}x{}",
            geometry.input_width,
            geometry.input_height,
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// A source frame that contributes `variants` items under one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: String,
    pub label: usize,
    pub variants: usize,
    /// Key of this source's parameter stream.
    pub seed: u64,
}

impl SourceSpec {
    /// Derives the stream key from the master seed and the source id, so a
    /// source keeps its variants when the source list is reordered.
    pub fn new(id: impl Into<String>, label: usize, variants: usize, master_seed: u64) -> Self {
        let id = id.into();
        let seed = derive(master_seed, hash_str(&id));
        Self { id, label, variants, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// Index into [`SraDataset::sources`].
    pub source: usize,
    pub label: usize,
    pub variant_index: u64,
    pub split: Split,
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_id: String,
    pub label: String,
    pub variant_index: u64,
    pub seed: u64,
    pub split: Split,
}

/// Labelled plan of augmented items. Pixels are produced on demand by
/// [`SraCorpus::render`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SraDataset {
    pub classes: Vec<String>,
    pub sources: Vec<SourceSpec>,
    pub items: Vec<DatasetItem>,
}

impl SraDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.classes.len()];
        for item in self.items.iter().filter(|i| i.split == split) {
            counts[item.label] += 1;
        }
        counts
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.items
            .iter()
            .map(|item| {
                let src = &self.sources[item.source];
                ManifestRecord {
                    source_id: src.id.clone(),
                    label: self.classes[item.label].clone(),
                    variant_index: item.variant_index,
                    seed: src.seed,
                    split: item.split,
                }
            })
            .collect()
    }

    pub fn item_id(&self, index: usize) -> String {
        let item = &self.items[index];
        alloc::format!("{}_{}", self.sources[item.source].id, item.variant_index)
    }
}

/// Expands sources into items, then shuffles and splits them.
///
/// The split is stratified: each class sends `floor(n_c * f)` items to
/// training, and the leftover training slots (so that the total is
/// `round(n * f)`) go to the classes with the largest fractional parts.
pub fn plan_sra_dataset(
    classes: Vec<String>,
    sources: Vec<SourceSpec>,
    split_fraction: f64,
    split_seed: u64,
) -> Result<SraDataset> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Config(alloc::format!(
            "split fraction {split_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut seen = BTreeSet::new();
    for s in &sources {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Config(alloc::format!("duplicate source id `{}`", s.id)));
        }
        if s.label >= classes.len() {
            return Err(Error::Config(alloc::format!(
                "source `{}` has label index {} but only {} classes",
                s.id,
                s.label,
                classes.len()
            )));
        }
    }

    let mut per_class: Vec<Vec<DatasetItem>> = alloc::vec![Vec::new(); classes.len()];
    for (si, s) in sources.iter().enumerate() {
        for v in 0..s.variants as u64 {
            per_class[s.label].push(DatasetItem {
                source: si,
                label: s.label,
                variant_index: v,
                split: Split::Validation,
            });
        }
    }

    let total: usize = per_class.iter().map(Vec::len).sum();
    let target = libm::round(total as f64 * split_fraction) as usize;
    let mut quotas: Vec<usize> = Vec::with_capacity(classes.len());
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for (c, items) in per_class.iter().enumerate() {
        let exact = items.len() as f64 * split_fraction;
        let base = libm::floor(exact) as usize;
        quotas.push(base);
        remainders.push((exact - base as f64, c));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = target.saturating_sub(quotas.iter().sum());
    for &(_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[c] < per_class[c].len() {
            quotas[c] += 1;
            missing -= 1;
        }
    }

    let mut items = Vec::with_capacity(total);
    for (c, mut class_items) in per_class.into_iter().enumerate() {
        KeyedRng::new(split_seed, c as u64).shuffle(&mut class_items);
        for (i, mut item) in class_items.into_iter().enumerate() {
            item.split = if i < quotas[c] { Split::Train } else { Split::Validation };
            items.push(item);
        }
    }
    KeyedRng::new(split_seed, u64::MAX).shuffle(&mut items);
    Ok(SraDataset { classes, sources, items })
}

/// A planned dataset together with the enhanced source frames it renders
/// from.
#[derive(Clone, Debug)]
pub struct SraCorpus {
    pub dataset: SraDataset,
    pub enhanced: Vec<GrayImage>,
    /// Augmentation config per source (labelled references and Other frames
    /// may differ).
    pub configs: Vec<AugmentConfig>,
    pub geometry: Geometry,
}

impl SraCorpus {
    pub fn render(&self, item_index: usize) -> Result<GrayImage> {
        let item = &self.dataset.items[item_index];
        let src = &self.dataset.sources[item.source];
        render_variant(
            &self.enhanced[item.source],
            src.seed,
            item.variant_index,
            &self.configs[item.source],
            &self.geometry,
        )
    }
}

/// A labelled reference frame.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    pub label: &'a str,
    pub id: &'a str,
    pub image: &'a RgbImage,
}

/// Builds the augmented corpus: every labelled reference contributes
/// `cfg_class.variants_per_image` items, every Other frame contributes
/// `cfg_other.variants_per_image` items under `other_label`.
///
/// Class order is the order of first appearance among the references, with
/// `other_label` appended when `others` is non-empty.
#[allow(clippy::too_many_arguments)]
pub fn build_sra_dataset(
    references: &[Reference<'_>],
    others: &[(&str, &RgbImage)],
    other_label: &str,
    cfg_class: &AugmentConfig,
    cfg_other: &AugmentConfig,
    split_fraction: f64,
    split_seed: u64,
    geometry: &Geometry,
) -> Result<SraCorpus> {
    if references.is_empty() {
        return Err(Error::Config("at least one labelled reference is required".into()));
    }
    cfg_class.validate()?;
    cfg_other.validate()?;
    let mut classes: Vec<String> = Vec::new();
    let mut sources = Vec::new();
    let mut enhanced = Vec::new();
    let mut configs = Vec::new();
    for r in references {
        check_frame(r.image, geometry)?;
        let label = match classes.iter().position(|c| c == r.label) {
            Some(i) => i,
            None => {
                classes.push(r.label.into());
                classes.len() - 1
            }
        };
        sources.push(SourceSpec::new(r.id, label, cfg_class.variants_per_image, cfg_class.master_seed));
        enhanced.push(imgproc::enhance(r.image, &cfg_class.enhance)?);
        configs.push(*cfg_class);
    }
    if !others.is_empty() {
        if classes.iter().any(|c| c == other_label) {
            return Err(Error::Config(alloc::format!(
                "reference label `{other_label}` collides with the catch-all class"
            )));
        }
        classes.push(other_label.into());
        let label = classes.len() - 1;
        for (id, img) in others {
            check_frame(img, geometry)?;
            sources.push(SourceSpec::new(*id, label, cfg_other.variants_per_image, cfg_other.master_seed));
            enhanced.push(imgproc::enhance(img, &cfg_other.enhance)?);
            configs.push(*cfg_other);
        }
    }
    let dataset = plan_sra_dataset(classes, sources, split_fraction, split_seed)?;
    Ok(SraCorpus { dataset, enhanced, configs, geometry: *geometry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    #[test]
    fn degenerate_ranges_give_identity() {
        let cfg = AugmentConfig::identity(1);
        for i in 0..50 {
            assert_eq!(sample_params(9, i, &cfg), AffineParams::identity());
        }
    }

    #[test]
    fn draws_are_keyed() {
        let cfg = AugmentConfig::default();
        assert_eq!(sample_params(42, 7, &cfg), sample_params(42, 7, &cfg));
        assert_ne!(sample_params(42, 7, &cfg), sample_params(42, 8, &cfg));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { variants_per_image: 0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { shear_max: -0.1, ..Default::default() }.validate().is_err());
    }

    fn other_sources(n: usize, variants: usize) -> Vec<SourceSpec> {
        (0..n).map(|i| SourceSpec::new(format!("o{i}"), 0, variants, 1)).collect()
    }

    #[test]
    fn plan_counts_match_large_scale_split() {
        let plan = plan_sra_dataset(vec!["Other".into()], other_sources(3126, 20), 50_000.0 / 62_520.0, 3)
            .unwrap();
        assert_eq!(plan.len(), 62_520);
        assert_eq!(plan.split_indices(Split::Train).len(), 50_000);
        assert_eq!(plan.split_indices(Split::Validation).len(), 12_520);
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let mut sources = other_sources(3, 7);
        sources.push(SourceSpec::new("a", 1, 5, 1));
        sources.push(SourceSpec::new("b", 2, 9, 1));
        let plan = plan_sra_dataset(vec!["O".into(), "A".into(), "B".into()], sources, 0.7, 11).unwrap();
        let total = plan.len();
        let train = plan.split_indices(Split::Train).len();
        assert_eq!(total, 35);
        assert!((train as f64 - total as f64 * 0.7).abs() <= 1.0);
        assert!(plan.class_counts(Split::Validation).iter().all(|&c| c > 0));
        assert!(plan.class_counts(Split::Train).iter().all(|&c| c > 0));
    }

    #[test]
    fn plan_rejects_bad_input() {
        assert!(plan_sra_dataset(vec!["O".into()], other_sources(2, 1), 1.0, 0).is_err());
        let mut dup = other_sources(2, 1);
        dup[1].id = "o0".into();
        assert!(plan_sra_dataset(vec!["O".into()], dup, 0.5, 0).is_err());
    }

    #[test]
    fn empty_references_rejected() {
        let cfg = AugmentConfig::default();
        let r = build_sra_dataset(&[], &[], "Other", &cfg, &cfg, 0.8, 0, &Geometry::DESK);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn wrong_reference_size_rejected() {
        let img = RgbImage::from_fn(10, 10, |_, _| [0.5; 3]);
        assert!(matches!(
            augment_reference(&img, &AugmentConfig::identity(1)),
            Err(Error::Dimension(_))
        ));
    }
}
