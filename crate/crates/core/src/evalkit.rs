//! Confusion matrices, precision/recall and per-epoch reports.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;
use serde::{Deserialize, Serialize};

use crate::neuralnet::{Network, Scalar, Tensor};
use crate::{Error, Result};

/// Column header used for abstentions.
pub const ABSTAIN: &str = "abstain";

/// Rows are true classes, columns predicted classes. When `abstain` is set
/// an extra final column counts items that received no prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub abstain: bool,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>, abstain: bool) -> Self {
        let cols = classes.len() + abstain as usize;
        let counts = vec![vec![0; cols]; classes.len()];
        Self { classes, abstain, counts }
    }

    /// Records one outcome; `predicted = None` is an abstention.
    pub fn record(&mut self, truth: usize, predicted: Option<usize>) -> Result<()> {
        let n = self.classes.len();
        if truth >= n {
            return Err(Error::UnknownLabel(alloc::format!("class index {truth}")));
        }
        let col = match predicted {
            Some(p) if p < n => p,
            Some(p) => return Err(Error::UnknownLabel(alloc::format!("class index {p}"))),
            None if self.abstain => n,
            None => return Err(Error::UnknownLabel(ABSTAIN.into())),
        };
        self.counts[truth][col] += 1;
        Ok(())
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.classes.iter().position(|c| c == label).ok_or_else(|| Error::UnknownLabel(label.into()))
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn abstained(&self, truth: usize) -> u64 {
        if self.abstain {
            self.counts[truth][self.classes.len()]
        } else {
            0
        }
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// CSV with a header row of predicted labels and one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true");
        for c in &self.classes {
            s.push(',');
            s.push_str(c);
        }
        if self.abstain {
            s.push(',');
            s.push_str(ABSTAIN);
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            s.push_str(c);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Builds a matrix from `(true, predicted)` label pairs. Predicted `None` is
/// an abstention and requires `abstain`.
pub fn confusion_matrix(
    classes: &[&str],
    pairs: &[(&str, Option<&str>)],
    abstain: bool,
) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(classes.iter().map(|c| c.to_string()).collect(), abstain);
    for (truth, pred) in pairs {
        let t = m.index_of(truth)?;
        let p = pred.map(|p| m.index_of(p)).transpose()?;
        m.record(t, p)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassScore>,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

impl ClassMetrics {
    /// Unweighted means over the given class indices.
    pub fn mean_over(&self, classes: &[usize]) -> (f64, f64) {
        if classes.is_empty() {
            return (0.0, 0.0);
        }
        let n = classes.len() as f64;
        let p = classes.iter().map(|&c| self.per_class[c].precision).sum::<f64>() / n;
        let r = classes.iter().map(|&c| self.per_class[c].recall).sum::<f64>() / n;
        (p, r)
    }
}

/// Per-class precision and recall; an empty denominator yields 0. Means are
/// unweighted over the class list (abstentions are not a class).
pub fn precision_recall(m: &ConfusionMatrix) -> ClassMetrics {
    let per_class: Vec<ClassScore> = m
        .classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let hit = m.get(c, c) as f64;
            let predicted = m.predicted_count(c);
            let support = m.support(c);
            ClassScore {
                class: name.clone(),
                precision: if predicted == 0 { 0.0 } else { hit / predicted as f64 },
                recall: if support == 0 { 0.0 } else { hit / support as f64 },
                support,
            }
        })
        .collect();
    let n = per_class.len().max(1) as f64;
    let mean_precision = per_class.iter().map(|s| s.precision).sum::<f64>() / n;
    let mean_recall = per_class.iter().map(|s| s.recall).sum::<f64>() / n;
    ClassMetrics { per_class, mean_precision, mean_recall }
}

/// What a report is indexed by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportTag {
    Epoch(u32),
    Threshold(f64),
}

impl ReportTag {
    pub fn column(&self) -> &'static str {
        match self {
            ReportTag::Epoch(_) => "epoch",
            ReportTag::Threshold(_) => "threshold",
        }
    }

    pub fn value(&self) -> String {
        match self {
            ReportTag::Epoch(e) => e.to_string(),
            ReportTag::Threshold(t) => alloc::format!("{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopPrediction {
    pub id: String,
    pub probability: f64,
    pub true_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: ReportTag,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    pub accuracy: f64,
    /// Per class, the items with the highest probability for that class.
    pub top: Vec<Vec<TopPrediction>>,
}

impl EvalReport {
    pub fn from_confusion(tag: ReportTag, confusion: ConfusionMatrix) -> Self {
        let metrics = precision_recall(&confusion);
        let accuracy = confusion.accuracy();
        let top = vec![Vec::new(); confusion.classes.len()];
        Self { tag, confusion, metrics, accuracy, top }
    }
}

/// Header for [`metrics_csv_rows`] output.
pub fn metrics_csv_header(tag: &ReportTag) -> String {
    alloc::format!("{},class,precision,recall,support\n", tag.column())
}

/// One `tag,class,precision,recall,support` row per class.
pub fn metrics_csv_rows(report: &EvalReport) -> String {
    let mut s = String::new();
    for c in &report.metrics.per_class {
        let _ = writeln!(s, "{},{},{},{},{}", report.tag.value(), c.class, c.precision, c.recall, c.support);
    }
    s
}

/// A parsed metrics row: `(tag value, score)`.
pub type MetricsRow = (f64, ClassScore);

/// Parses the output of [`metrics_csv_header`] + [`metrics_csv_rows`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(alloc::format!("metrics line {}: `{line}`", i + 1));
        if fields.len() != 5 {
            return Err(bad());
        }
        let tag: f64 = fields[0].parse().map_err(|_| bad())?;
        rows.push((
            tag,
            ClassScore {
                class: fields[1].into(),
                precision: fields[2].parse().map_err(|_| bad())?,
                recall: fields[3].parse().map_err(|_| bad())?,
                support: fields[4].parse().map_err(|_| bad())?,
            },
        ));
    }
    Ok(rows)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Builds a report from per-item class probabilities.
pub fn evaluate_probabilities(
    tag: ReportTag,
    classes: &[String],
    ids: &[String],
    probabilities: &[Vec<f64>],
    labels: &[usize],
    top_k: usize,
) -> Result<EvalReport> {
    if ids.len() != probabilities.len() || ids.len() != labels.len() {
        return Err(Error::Dimension(alloc::format!(
            "{} ids, {} probability rows, {} labels",
            ids.len(),
            probabilities.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(classes.to_vec(), false);
    for (p, &l) in probabilities.iter().zip(labels) {
        if p.len() != classes.len() {
            return Err(Error::Dimension(alloc::format!(
                "probability row has {} entries for {} classes",
                p.len(),
                classes.len()
            )));
        }
        m.record(l, Some(argmax(p)))?;
    }
    let mut report = EvalReport::from_confusion(tag, m);
    for c in 0..classes.len() {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| probabilities[b][c].total_cmp(&probabilities[a][c]).then(a.cmp(&b)));
        report.top[c] = order
            .into_iter()
            .take(top_k)
            .map(|i| TopPrediction {
                id: ids[i].clone(),
                probability: probabilities[i][c],
                true_label: classes[labels[i]].clone(),
            })
            .collect();
    }
    Ok(report)
}

/// Class probabilities for `images` (each `side * side` values), evaluated
/// in batches with dropout off.
pub fn predict_probabilities<T: Scalar>(
    network: &Network<T>,
    images: &[&[f64]],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let side = network.config.input_side;
    let classes = network.config.class_count;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * side * side);
        for img in chunk {
            if img.len() != side * side {
                return Err(Error::Dimension(alloc::format!(
                    "image has {} pixels, network expects {side}x{side}",
                    img.len()
                )));
            }
            data.extend(img.iter().map(|&v| T::of(v)));
        }
        let batch = Tensor::new(vec![chunk.len(), 1, side, side], data)?;
        let probs = network.predict(&batch)?;
        out.extend(probs.data().chunks_exact(classes).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

/// Runs the network over a labelled test set and reports per-class metrics
/// with the `top_k` most confident items per class.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_epoch<T: Scalar>(
    network: &Network<T>,
    epoch: u32,
    classes: &[String],
    ids: &[String],
    images: &[&[f64]],
    labels: &[usize],
    top_k: usize,
    batch_size: usize,
) -> Result<EvalReport> {
    if classes.len() != network.config.class_count {
        return Err(Error::Dimension(alloc::format!(
            "{} class names for a {}-way network",
            classes.len(),
            network.config.class_count
        )));
    }
    let probs = predict_probabilities(network, images, batch_size)?;
    evaluate_probabilities(ReportTag::Epoch(epoch), classes, ids, &probs, labels, top_k)
}
