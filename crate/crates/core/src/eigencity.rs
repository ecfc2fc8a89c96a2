//! Eigencities: standard scaling, snapshot PCA and cosine-distance voting.
//!
//! With a few hundred samples of tens of thousands of spectral features the
//! covariance matrix is far too large to decompose directly. The components
//! are instead recovered from the `n x n` Gram matrix of the centered
//! samples, which shares its non-zero eigenvalues with the covariance.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::evalkit::{ConfusionMatrix, EvalReport, ReportTag};
use crate::linalg::{dot, norm, symmetric_eigen};
use crate::{Error, Result};

/// Standard deviations are floored here so constant features stay finite.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl ScalerStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(Error::Dimension(alloc::format!("row {i} has {} features, expected {d}", r.len())));
    }
    Ok(d)
}

fn column_means(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Per-feature mean and population standard deviation (floored at
/// [`STD_FLOOR`]).
pub fn fit_scaler(rows: &[Vec<f64>]) -> Result<ScalerStats> {
    if rows.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: rows.len() });
    }
    let d = check_rows(rows)?;
    let mean = column_means(rows, d);
    let mut var = vec![0.0; d];
    for r in rows {
        for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let n = rows.len() as f64;
    let std = var.iter().map(|v| libm::sqrt(v / n).max(STD_FLOOR)).collect();
    Ok(ScalerStats { mean, std, epsilon: STD_FLOOR })
}

pub fn apply_scaler(stats: &ScalerStats, row: &[f64]) -> Result<Vec<f64>> {
    if row.len() != stats.dim() {
        return Err(Error::Dimension(alloc::format!(
            "row has {} features, scaler expects {}",
            row.len(),
            stats.dim()
        )));
    }
    Ok(row.iter().zip(&stats.mean).zip(&stats.std).map(|((v, m), s)| (v - m) / s).collect())
}

/// Principal components plus the scaling that maps raw rows into the
/// component space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub scaler: ScalerStats,
    /// `k` unit rows of length `d`, pairwise orthogonal.
    pub components: Vec<Vec<f64>>,
    /// Population variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.scaler.dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

/// Top-`k` principal components of `rows`, via the Gram matrix.
///
/// Rows are centered on their column means (a no-op for standard-scaled
/// input); the centering is stored in the returned model's scaler, with unit
/// standard deviations. Each component's largest-magnitude coordinate is
/// made positive.
pub fn fit_pca(rows: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let d = check_rows(rows)?;
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::Config(alloc::format!(
            "component count {k} must lie in 1..={} for {n} samples of {d} features",
            (n - 1).min(d)
        )));
    }
    let mean = column_means(rows, d);
    let centered: Vec<Vec<f64>> =
        rows.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();

    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g = dot(&centered[i], &centered[j]) / n as f64;
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let (values, vectors) = symmetric_eigen(&gram, n);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = top * 1e-12 * n as f64;

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained = Vec::with_capacity(k);
    for (i, &lambda) in values.iter().take(k).enumerate() {
        let mut v = vec![0.0; d];
        if lambda > cutoff {
            let scale = 1.0 / libm::sqrt(n as f64 * lambda);
            for (row, &u) in centered.iter().zip(&vectors[i]) {
                for (acc, x) in v.iter_mut().zip(row) {
                    *acc += u * x * scale;
                }
            }
        }
        let v = orthonormalize(v, &components).unwrap_or_else(|| complete_basis(&components, d));
        components.push(v);
        explained.push(lambda.max(0.0));
    }
    for c in &mut components {
        orient(c);
    }
    Ok(PcaModel {
        scaler: ScalerStats { mean, std: vec![1.0; d], epsilon: STD_FLOOR },
        components,
        explained_variance: explained,
    })
}

/// Two passes of Gram-Schmidt against `basis`, then normalization. `None` if
/// nothing substantial is left.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let before = norm(&v);
    if before == 0.0 {
        return None;
    }
    for _ in 0..2 {
        for b in basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
    let after = norm(&v);
    if after < 1e-6 * before {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= after);
    Some(v)
}

/// A unit vector orthogonal to `basis`, taken from the standard basis.
fn complete_basis(basis: &[Vec<f64>], d: usize) -> Vec<f64> {
    (0..d)
        .find_map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            let v = orthonormalize(e, basis)?;
            (dot(&v, &v) > 0.5).then_some(v)
        })
        .expect("k <= d leaves room for another direction")
}

fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if libm::fabs(*x) > libm::fabs(v[best]) {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Standard-scales raw rows, then fits `k` components. The returned scaler
/// maps raw rows straight into the component frame.
pub fn fit_eigencities(rows: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let stats = fit_scaler(rows)?;
    let scaled = rows.iter().map(|r| apply_scaler(&stats, r)).collect::<Result<Vec<_>>>()?;
    let mut model = fit_pca(&scaled, k)?;
    // Fold the residual centering (≈ 0) into the raw-space scaler.
    let mean = stats.mean.iter().zip(&stats.std).zip(&model.scaler.mean).map(|((m, s), c)| m + c * s).collect();
    model.scaler = ScalerStats { mean, std: stats.std, epsilon: STD_FLOOR };
    Ok(model)
}

/// Scales `row` and takes its coordinates along each component.
pub fn project(model: &PcaModel, row: &[f64]) -> Result<Embedding> {
    let scaled = apply_scaler(&model.scaler, row)?;
    Ok(Embedding(model.components.iter().map(|c| dot(c, &scaled)).collect()))
}

/// `1 - cos(a, b)`, in `[0, 2]`. A zero vector is at distance 1 from
/// everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    /// Predicted class, or `None` when no training sample is under the
    /// threshold.
    pub label: Option<usize>,
    /// Training samples per class with distance strictly below the threshold.
    pub votes: Vec<usize>,
    /// Smallest distance to any training sample of each class (infinite for
    /// classes without samples).
    pub best_distance: Vec<f64>,
}

/// Votes from precomputed distances to each training sample.
fn vote(distances: &[f64], train_labels: &[usize], class_count: usize, threshold: f64) -> VoteResult {
    let mut votes = vec![0usize; class_count];
    let mut best_distance = vec![f64::INFINITY; class_count];
    for (&d, &l) in distances.iter().zip(train_labels) {
        if d < threshold {
            votes[l] += 1;
        }
        if d < best_distance[l] {
            best_distance[l] = d;
        }
    }
    let mut label = None;
    for c in 0..class_count {
        if votes[c] == 0 {
            continue;
        }
        label = match label {
            None => Some(c),
            Some(b) if votes[c] > votes[b] || (votes[c] == votes[b] && best_distance[c] < best_distance[b]) => Some(c),
            keep => keep,
        };
    }
    VoteResult { label, votes, best_distance }
}

/// Labels `query` with the class owning the most training embeddings
/// strictly closer than `threshold`; vote ties go to the class with the
/// single closest sample.
pub fn classify_vote(
    query: &Embedding,
    train: &[(Embedding, usize)],
    class_count: usize,
    threshold: f64,
) -> Result<VoteResult> {
    if train.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if let Some((_, l)) = train.iter().find(|(_, l)| *l >= class_count) {
        return Err(Error::UnknownLabel(alloc::format!("class index {l}")));
    }
    let distances: Vec<f64> = train.iter().map(|(e, _)| cosine_distance(&query.0, &e.0)).collect();
    let labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();
    Ok(vote(&distances, &labels, class_count, threshold))
}

/// `0, step, 2·step, ...` up to and including `stop` (within rounding).
pub fn threshold_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || stop < start {
        return Err(Error::Config(alloc::format!("bad threshold range {start}:{stop}:{step}")));
    }
    let count = libm::floor((stop - start) / step + 1e-9) as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

/// The 21-point grid `0.00, 0.05, ..., 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    threshold_grid(0.0, 1.0, 0.05).expect("static range")
}

/// Classifies every test embedding at every threshold. Abstentions land in
/// the matrix's abstain column, so they lower recall but never precision.
///
/// `classes` must cover every test and training label; test items may carry
/// labels (such as a catch-all class) that no training sample has.
pub fn threshold_sweep(
    test: &[(Embedding, usize)],
    train: &[(Embedding, usize)],
    classes: &[String],
    thresholds: &[f64],
) -> Result<Vec<EvalReport>> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one threshold is required".into()));
    }
    if train.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = classes.len();
    if let Some(l) = test.iter().chain(train).map(|(_, l)| *l).find(|&l| l >= n) {
        return Err(Error::UnknownLabel(alloc::format!("class index {l}")));
    }
    let train_labels: Vec<usize> = train.iter().map(|(_, l)| *l).collect();
    let distances: Vec<Vec<f64>> = test
        .iter()
        .map(|(q, _)| train.iter().map(|(e, _)| cosine_distance(&q.0, &e.0)).collect())
        .collect();
    thresholds
        .iter()
        .map(|&t| {
            let mut m = ConfusionMatrix::new(classes.to_vec(), true);
            for ((_, truth), d) in test.iter().zip(&distances) {
                m.record(*truth, vote(d, &train_labels, n, t).label)?;
            }
            Ok(EvalReport::from_confusion(ReportTag::Threshold(t), m))
        })
        .collect()
}

/// `threshold,class,precision,recall,support` rows for a whole sweep.
pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("threshold,class,precision,recall,support\n");
    for r in reports {
        s.push_str(&crate::evalkit::metrics_csv_rows(r));
    }
    s
}

pub const MODEL_MAGIC: &[u8; 4] = b"ECPC";
pub const MODEL_VERSION: u32 = 1;

/// Little-endian model file: magic, version, k, d (u32 each), then mean,
/// std, components (row-major) and explained variance as f64.
pub fn encode_model(model: &PcaModel) -> Vec<u8> {
    let (k, d) = (model.k(), model.dim());
    let mut out = Vec::with_capacity(16 + 8 * (2 * d + k * d + k));
    out.extend_from_slice(MODEL_MAGIC);
    for v in [MODEL_VERSION, k as u32, d as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let floats = model
        .scaler
        .mean
        .iter()
        .chain(&model.scaler.std)
        .chain(model.components.iter().flatten())
        .chain(&model.explained_variance);
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<PcaModel> {
    if bytes.len() < 16 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format("not an eigencity model file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let version = word(0) as u32;
    if version != MODEL_VERSION {
        return Err(Error::Format(alloc::format!("unsupported model version {version}")));
    }
    let (k, d) = (word(1), word(2));
    let floats = 2 * d + k * d + k;
    if bytes.len() != 16 + 8 * floats {
        return Err(Error::Format(alloc::format!(
            "model with k={k}, d={d} needs {} bytes, file has {}",
            16 + 8 * floats,
            bytes.len()
        )));
    }
    let vals: Vec<f64> =
        bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mean = vals[..d].to_vec();
    let std = vals[d..2 * d].to_vec();
    let components = vals[2 * d..2 * d + k * d].chunks(d.max(1)).take(k).map(<[f64]>::to_vec).collect();
    let explained_variance = vals[2 * d + k * d..].to_vec();
    Ok(PcaModel { scaler: ScalerStats { mean, std, epsilon: STD_FLOOR }, components, explained_variance })
}
