//! On-disk datasets: image lists, materialized SRA datasets and the
//! in-memory labelled sets the trainers consume.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nightatlas_core::augment::{ManifestRecord, Split, SraCorpus};
use nightatlas_core::imgproc::{self, EnhanceConfig, Geometry, GrayImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pngio;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CLASSES_FILE: &str = "classes.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Single labelled reference frame of a class.
    Reference,
    /// Frame of the catch-all class.
    Other,
    /// Held-out frame, never augmented.
    Test,
}

/// One row of an image list CSV (`id,label,path,role`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListEntry {
    pub id: String,
    pub label: String,
    pub path: PathBuf,
    pub role: Role,
}

/// Reads an image list; relative paths resolve against the list's directory.
pub fn read_list(path: &Path) -> Result<Vec<ListEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ListEntry>().enumerate() {
        let mut entry = row.with_context(|| format!("{} line {}", path.display(), i + 2))?;
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_list(path: &Path, entries: &[ListEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_manifest_jsonl(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest_jsonl(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn item_file_name(record: &ManifestRecord) -> String {
    format!("{}_{}.png", record.source_id, record.variant_index)
}

/// Renders every item of `corpus` into `dir/images/<source_id>_<variant>.png`
/// and writes the JSONL manifest and class list next to it.
pub fn materialize(corpus: &SraCorpus, dir: &Path) -> Result<Vec<ManifestRecord>> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    let records = corpus.dataset.manifest();
    (0..records.len()).into_par_iter().try_for_each(|i| -> Result<()> {
        let img = corpus.render(i)?;
        pngio::write_gray(&images.join(item_file_name(&records[i])), &img)
    })?;
    write_manifest_jsonl(&dir.join(MANIFEST_FILE), &records)?;
    fs::write(dir.join(CLASSES_FILE), serde_json::to_string_pretty(&corpus.dataset.classes)?)?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub image: GrayImage,
}

/// Labelled training and validation images sharing one class list.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSet {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

impl LabelledSet {
    /// Renders every item of `corpus` (in parallel, order preserved).
    pub fn from_corpus(corpus: &SraCorpus) -> Result<Self> {
        let ds = &corpus.dataset;
        let rendered: Vec<GrayImage> =
            (0..ds.len()).into_par_iter().map(|i| corpus.render(i)).collect::<nightatlas_core::Result<_>>()?;
        let mut set = Self { classes: ds.classes.clone(), train: Vec::new(), validation: Vec::new() };
        for (i, image) in rendered.into_iter().enumerate() {
            let item = &ds.items[i];
            let sample = Sample { id: ds.item_id(i), label: item.label, image };
            match item.split {
                Split::Train => set.train.push(sample),
                Split::Validation => set.validation.push(sample),
            }
        }
        Ok(set)
    }

    /// Loads a directory written by [`materialize`].
    pub fn load(dir: &Path) -> Result<Self> {
        let classes: Vec<String> = serde_json::from_str(
            &fs::read_to_string(dir.join(CLASSES_FILE)).with_context(|| format!("reading {}", dir.join(CLASSES_FILE).display()))?,
        )?;
        let records = read_manifest_jsonl(&dir.join(MANIFEST_FILE))?;
        let samples: Vec<(Split, Sample)> = records
            .par_iter()
            .map(|r| -> Result<(Split, Sample)> {
                let label = classes
                    .iter()
                    .position(|c| *c == r.label)
                    .with_context(|| format!("label `{}` is not in {CLASSES_FILE}", r.label))?;
                let image = pngio::read_gray(&dir.join(IMAGE_DIR).join(item_file_name(r)))?;
                Ok((r.split, Sample { id: format!("{}_{}", r.source_id, r.variant_index), label, image }))
            })
            .collect::<Result<_>>()?;
        let mut set = Self { classes, train: Vec::new(), validation: Vec::new() };
        for (split, s) in samples {
            match split {
                Split::Train => set.train.push(s),
                Split::Validation => set.validation.push(s),
            }
        }
        Ok(set)
    }

    /// Keeps only the given classes (by name), re-indexing labels.
    pub fn restrict(&self, keep: &[String]) -> Self {
        let remap = |samples: &[Sample]| {
            samples
                .iter()
                .filter_map(|s| {
                    let name = &self.classes[s.label];
                    keep.iter().position(|k| k == name).map(|label| Sample { label, ..s.clone() })
                })
                .collect()
        };
        Self { classes: keep.to_vec(), train: remap(&self.train), validation: remap(&self.validation) }
    }

    /// Fails when a class has no training or no validation item.
    pub fn check_coverage(&self) -> Result<()> {
        for (split, samples) in [("train", &self.train), ("validation", &self.validation)] {
            for (c, name) in self.classes.iter().enumerate() {
                if !samples.iter().any(|s| s.label == c) {
                    bail!("class `{name}` has no {split} items");
                }
            }
        }
        Ok(())
    }
}

/// Loads held-out frames and runs them through enhancement and `geometry`
/// without augmentation. Labels must belong to `classes`.
pub fn prepare_test_images(
    entries: &[ListEntry],
    classes: &[String],
    enhance: &EnhanceConfig,
    geometry: &Geometry,
) -> Result<Vec<Sample>> {
    entries
        .par_iter()
        .map(|e| {
            let label = classes
                .iter()
                .position(|c| *c == e.label)
                .with_context(|| format!("test item `{}` has unknown label `{}`", e.id, e.label))?;
            let rgb = pngio::read_rgb(&e.path)?;
            let image = geometry.apply(&imgproc::enhance(&rgb, enhance)?).with_context(|| format!("preparing {}", e.id))?;
            Ok(Sample { id: e.id.clone(), label, image })
        })
        .collect()
}
