//! Report files: confusion matrix, per-class metrics, top predictions and
//! contact sheets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use nightatlas_core::evalkit::{self, EvalReport, ReportTag, TopPrediction};
use nightatlas_core::imgproc::GrayImage;

use crate::pngio;

pub const CONFUSION_FILE: &str = "confusion.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TOP_FILE: &str = "top_predictions.json";
pub const PROBABILITIES_FILE: &str = "probabilities.csv";

/// 3x5 glyphs for digits and the decimal point, one row per `u8` (low three
/// bits, most significant bit on the left).
const GLYPHS: [[u8; 5]; 11] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
    [0b000, 0b000, 0b000, 0b000, 0b010],
];

const GLYPH_SCALE: usize = 3;
const CAPTION_HEIGHT: usize = 5 * GLYPH_SCALE + 6;
const GAP: usize = 4;
const COLUMNS: usize = 5;

fn draw_text(canvas: &mut [f64], width: usize, x0: usize, y0: usize, text: &str) {
    let mut x = x0;
    for ch in text.chars() {
        let glyph = match ch {
            '0'..='9' => &GLYPHS[ch as usize - '0' as usize],
            '.' => &GLYPHS[10],
            _ => {
                x += 4 * GLYPH_SCALE;
                continue;
            }
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    for dy in 0..GLYPH_SCALE {
                        for dx in 0..GLYPH_SCALE {
                            let (px, py) = (x + col * GLYPH_SCALE + dx, y0 + row * GLYPH_SCALE + dy);
                            if px < width {
                                canvas[py * width + px] = 1.0;
                            }
                        }
                    }
                }
            }
        }
        x += 4 * GLYPH_SCALE;
    }
}

/// Tiles `tiles` in rows of five, each with its caption underneath.
pub fn contact_sheet(tiles: &[(GrayImage, String)]) -> Option<GrayImage> {
    let side = tiles.iter().map(|(t, _)| t.width().max(t.height())).max()?;
    let cols = tiles.len().min(COLUMNS);
    let rows = tiles.len().div_ceil(COLUMNS);
    let cell_w = side + GAP;
    let cell_h = side + CAPTION_HEIGHT + GAP;
    let (width, height) = (cols * cell_w + GAP, rows * cell_h + GAP);
    let mut canvas = vec![0.0; width * height];
    for (i, (tile, caption)) in tiles.iter().enumerate() {
        let (ox, oy) = (GAP + (i % COLUMNS) * cell_w, GAP + (i / COLUMNS) * cell_h);
        for y in 0..tile.height() {
            for x in 0..tile.width() {
                canvas[(oy + y) * width + ox + x] = tile.get(x, y);
            }
        }
        draw_text(&mut canvas, width, ox, oy + side + 3, caption);
    }
    GrayImage::new(width, height, canvas).ok()
}

fn sheet_name(class: &str) -> String {
    let safe: String = class.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("top_{safe}.png")
}

/// Writes `confusion.csv`, `metrics.csv`, `top_predictions.json` and one
/// contact sheet per class (for classes whose top images `lookup` finds).
pub fn export_report(report: &EvalReport, dir: &Path, lookup: &dyn Fn(&str) -> Option<GrayImage>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    write(CONFUSION_FILE, &report.confusion.to_csv())?;
    write(METRICS_FILE, &(evalkit::metrics_csv_header(&report.tag) + &evalkit::metrics_csv_rows(report)))?;
    let top: BTreeMap<&str, &Vec<TopPrediction>> =
        report.confusion.classes.iter().map(String::as_str).zip(&report.top).collect();
    write(TOP_FILE, &serde_json::to_string_pretty(&top)?)?;
    for (class, preds) in report.confusion.classes.iter().zip(&report.top) {
        let tiles: Vec<(GrayImage, String)> =
            preds.iter().filter_map(|p| lookup(&p.id).map(|img| (img, format!("{:.3}", p.probability)))).collect();
        if let Some(sheet) = contact_sheet(&tiles) {
            pngio::write_gray(&dir.join(sheet_name(class)), &sheet)?;
        }
    }
    Ok(())
}

/// Concatenated metrics rows of several reports sharing a tag kind.
pub fn metrics_table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let mut out = evalkit::metrics_csv_header(&first.tag);
    for r in reports {
        out.push_str(&evalkit::metrics_csv_rows(r));
    }
    out
}

/// Per-report means, including a mean over `subset` (e.g. the cities only).
pub fn summary_table(reports: &[EvalReport], subset: &[usize]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let mut out = format!("{},accuracy,mean_precision,mean_recall,subset_precision,subset_recall\n", first.tag.column());
    for r in reports {
        let (sp, sr) = r.metrics.mean_over(subset);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.tag.value(),
            r.accuracy,
            r.metrics.mean_precision,
            r.metrics.mean_recall,
            sp,
            sr
        ));
    }
    out
}

/// Raw per-item probabilities: `id,label,<class...>`.
pub fn probabilities_csv(classes: &[String], ids: &[String], labels: &[usize], probs: &[Vec<f64>]) -> String {
    let mut out = format!("id,label,{}\n", classes.join(","));
    for ((id, &l), row) in ids.iter().zip(labels).zip(probs) {
        out.push_str(&format!("{id},{}", classes[l]));
        for p in row {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    out
}

pub struct ProbabilityDump {
    pub classes: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

pub fn read_probabilities(path: &Path) -> Result<ProbabilityDump> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        bail!("{}: header must start with `id,label`", path.display());
    }
    let classes: Vec<String> = headers.iter().skip(2).map(String::from).collect();
    let mut dump = ProbabilityDump { classes, ids: Vec::new(), labels: Vec::new(), probabilities: Vec::new() };
    for row in reader.records() {
        let row = row?;
        let label = dump.classes.iter().position(|c| c == &row[1]).with_context(|| format!("unknown label `{}`", &row[1]))?;
        dump.ids.push(row[0].to_string());
        dump.labels.push(label);
        dump.probabilities.push(row.iter().skip(2).map(|v| v.parse()).collect::<std::result::Result<_, _>>()?);
    }
    Ok(dump)
}

/// Rebuilds an epoch report from a probability dump.
pub fn report_from_dump(dump: &ProbabilityDump, epoch: u32, top_k: usize) -> Result<EvalReport> {
    Ok(evalkit::evaluate_probabilities(
        ReportTag::Epoch(epoch),
        &dump.classes,
        &dump.ids,
        &dump.probabilities,
        &dump.labels,
        top_k,
    )?)
}
