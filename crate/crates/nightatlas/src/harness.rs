//! Training orchestration for the convolutional classifier and the
//! eigencity baseline.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nightatlas_core::eigencity::{self, Embedding, PcaModel};
use nightatlas_core::evalkit::{self, argmax, EvalReport};
use nightatlas_core::imgproc::Geometry;
use nightatlas_core::neuralnet::{build_network, checkpoint, AdamConfig, AdamState, NetConfig, Network, Phase, Tensor};
use nightatlas_core::rng::{derive, KeyedRng};
use nightatlas_core::spectral::{spectral_features, SpectralOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelledSet, Sample};

/// Regularization setup: A is plain cross-entropy, B adds L2, C adds L2 and
/// dropout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
    #[default]
    C,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" | "a" => Ok(Mode::A),
            "B" | "b" => Ok(Mode::B),
            "C" | "c" => Ok(Mode::C),
            _ => Err(format!("unknown mode `{s}` (expected A, B or C)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Image and network size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 224x224 inputs and the full feature map counts.
    #[default]
    Standard,
    /// 64x64 inputs and a quarter of the feature maps.
    Desk,
}

impl Scale {
    pub fn geometry(self) -> Geometry {
        match self {
            Scale::Standard => Geometry::STANDARD,
            Scale::Desk => Geometry::DESK,
        }
    }

    pub fn net_config(self, class_count: usize) -> NetConfig {
        match self {
            Scale::Standard => NetConfig::standard(class_count),
            Scale::Desk => NetConfig::desk(class_count),
        }
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "standard" => Ok(Scale::Standard),
            "desk" => Ok(Scale::Desk),
            _ => Err(format!("unknown scale `{s}` (expected standard or desk)")),
        }
    }
}

pub const DEFAULT_L2: f64 = 5e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: u32,
    pub batch_size: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub dropout_seed: u64,
    pub learning_rate: Option<f64>,
    pub l2_lambda: Option<f64>,
    pub scale: Scale,
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::C,
            epochs: 50,
            batch_size: 64,
            init_seed: 1,
            shuffle_seed: 2,
            dropout_seed: 3,
            learning_rate: None,
            l2_lambda: None,
            scale: Scale::Standard,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            bail!("batch size must be at least 1");
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                bail!("learning rate {lr} must be positive");
            }
        }
        if let Some(l2) = self.l2_lambda {
            if !(l2 >= 0.0 && l2.is_finite()) {
                bail!("l2 lambda {l2} must be non-negative");
            }
        }
        Ok(())
    }

    /// Effective L2 weight after the mode is applied.
    pub fn effective_l2(&self) -> f64 {
        match self.mode {
            Mode::A => 0.0,
            Mode::B | Mode::C => self.l2_lambda.unwrap_or(DEFAULT_L2),
        }
    }

    pub fn net_config(&self, class_count: usize) -> NetConfig {
        let mut cfg = self.scale.net_config(class_count);
        cfg.l2_lambda = self.effective_l2();
        cfg.dropout_active = self.mode == Mode::C;
        cfg
    }

    pub fn adam(&self) -> AdamConfig {
        let mut a = AdamConfig::default();
        if let Some(lr) = self.learning_rate {
            a.learning_rate = lr;
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: u32,
    pub mean_loss: f64,
    pub val_accuracy: Option<f64>,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub step: u64,
    pub epoch: u32,
    pub raw_loss: f64,
}

pub struct TrainOutcome {
    pub network: Network<f32>,
    pub records: Vec<EpochRecord>,
    pub losses: Vec<LossSample>,
}

/// `runs/<name>/{config.json, curves/, checkpoints/, reports/}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        for sub in [run.curves(), run.checkpoints(), run.reports()] {
            fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        }
        Ok(run)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let run = Self { root: root.into() };
        if !run.root.is_dir() {
            bail!("run directory {} does not exist", run.root.display());
        }
        Ok(run)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn curves(&self) -> PathBuf {
        self.root.join("curves")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn checkpoint_path(&self, epoch: u32) -> PathBuf {
        self.checkpoints().join(format!("epoch_{epoch:03}.nann"))
    }

    /// Checkpoints present on disk as `(epoch, path)`, by epoch.
    pub fn list_checkpoints(&self) -> Result<Vec<(u32, PathBuf)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.checkpoints()).with_context(|| format!("listing {}", self.checkpoints().display()))? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(epoch) = name.strip_prefix("epoch_").and_then(|r| r.strip_suffix(".nann")).and_then(|e| e.parse().ok()) {
                out.push((epoch, path));
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Writes bytes via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("part");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, net: &Network<f32>) -> Result<()> {
    write_atomic(path, &checkpoint::encode(net))
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// Loss curve with an exponential moving average (`s = 0.6 s + 0.4 raw`).
pub fn loss_curve_csv(losses: &[LossSample]) -> String {
    let mut out = String::from("step,epoch,raw_loss,smoothed_loss\n");
    let mut smooth = None;
    for s in losses {
        let v = match smooth {
            None => s.raw_loss,
            Some(prev) => 0.6 * prev + 0.4 * s.raw_loss,
        };
        smooth = Some(v);
        out.push_str(&format!("{},{},{},{}\n", s.step, s.epoch, s.raw_loss, v));
    }
    out
}

pub fn accuracy_curve_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,val_accuracy\n");
    for r in records {
        if let Some(a) = r.val_accuracy {
            out.push_str(&format!("{},{}\n", r.epoch, a));
        }
    }
    out
}

fn batch_tensor(samples: &[&Sample], side: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(samples.len() * side * side);
    for s in samples {
        data.extend(s.image.data().iter().map(|&v| v as f32));
    }
    Ok(Tensor::new(vec![samples.len(), 1, side, side], data)?)
}

/// Class probabilities for `samples` in evaluation mode.
pub fn predict_samples(net: &Network<f32>, samples: &[Sample], batch: usize) -> Result<Vec<Vec<f64>>> {
    let images: Vec<&[f64]> = samples.iter().map(|s| s.image.data()).collect();
    Ok(evalkit::predict_probabilities(net, &images, batch)?)
}

pub fn accuracy(net: &Network<f32>, samples: &[Sample], batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let probs = predict_samples(net, samples, batch)?;
    let hits = probs.iter().zip(samples).filter(|(p, s)| argmax(p) == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

fn check_sides(data: &LabelledSet, side: usize) -> Result<()> {
    for s in data.train.iter().chain(&data.validation) {
        if s.image.width() != side || s.image.height() != side {
            bail!("item {} is {}x{}, the network expects {side}x{side}", s.id, s.image.width(), s.image.height());
        }
    }
    Ok(())
}

/// Trains a fresh network on `data.train`, evaluating on `data.validation`
/// after every epoch. With a run directory, a checkpoint per epoch and the
/// loss and accuracy curves are written into it.
pub fn train_cnn(data: &LabelledSet, cfg: &TrainConfig, run: Option<&RunDir>) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check_coverage()?;
    let net_cfg = cfg.net_config(data.classes.len());
    check_sides(data, net_cfg.input_side)?;
    let mut network: Network<f32> = build_network(&net_cfg, cfg.init_seed)?;
    let mut adam = AdamState::new(cfg.adam());
    let side = net_cfg.input_side;
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.sort_unstable();
        KeyedRng::new(cfg.shuffle_seed, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let batch = batch_tensor(&samples, side)?;
            let phase = Phase::Train { seed: derive(cfg.dropout_seed, step) };
            let loss = network.train_step(&mut adam, &batch, &labels, phase)?.total();
            losses.push(LossSample { step, epoch, raw_loss: loss });
            total += loss;
            batches += 1;
            step += 1;
        }
        let val_accuracy = if cfg.eval_every_epoch || epoch == cfg.epochs {
            Some(accuracy(&network, &data.validation, cfg.batch_size.max(32))?)
        } else {
            None
        };
        let checkpoint = match run {
            Some(run) => {
                let path = run.checkpoint_path(epoch);
                save_checkpoint(&path, &network)?;
                Some(path)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: total / batches.max(1) as f64,
            val_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
            checkpoint,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, validation accuracy {}, {:.1}s",
            record.mean_loss,
            val_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            record.wall_seconds
        );
        records.push(record);
        if let Some(run) = run {
            write_atomic(&run.curves().join("loss.csv"), loss_curve_csv(&losses).as_bytes())?;
            write_atomic(&run.curves().join("accuracy.csv"), accuracy_curve_csv(&records).as_bytes())?;
        }
    }
    Ok(TrainOutcome { network, records, losses })
}

/// Evaluates every checkpoint of a run on `test`, one report per epoch.
pub fn evaluate_run(run: &RunDir, classes: &[String], test: &[Sample], top_k: usize, batch: usize) -> Result<Vec<(EvalReport, Vec<Vec<f64>>)>> {
    let ids: Vec<String> = test.iter().map(|s| s.id.clone()).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let mut out = Vec::new();
    for (epoch, path) in run.list_checkpoints()? {
        let net = load_checkpoint(&path)?;
        if net.config.class_count != classes.len() {
            bail!("{} predicts {} classes, the test set has {}", path.display(), net.config.class_count, classes.len());
        }
        let probs = predict_samples(&net, test, batch)?;
        let report = evalkit::evaluate_probabilities(evalkit::ReportTag::Epoch(epoch), classes, &ids, &probs, &labels, top_k)?;
        out.push((report, probs));
    }
    if out.is_empty() {
        bail!("no checkpoints in {}", run.checkpoints().display());
    }
    Ok(out)
}

/// The baseline's feature vector: the unrolled magnitude spectrum.
pub fn eigencity_features(sample: &Sample) -> Vec<f64> {
    spectral_features(&sample.image, SpectralOptions::default())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigencityModel {
    pub classes: Vec<String>,
    pub model: PcaModel,
    /// `(id, label, embedding)` of every training item.
    pub embeddings: Vec<(String, usize, Embedding)>,
}

pub const MODEL_FILE: &str = "model.ecpc";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const EIGEN_CLASSES_FILE: &str = "classes.json";

/// Fits the eigencity basis on `samples` and projects each of them.
pub fn train_eigencity(classes: &[String], samples: &[Sample], k: usize) -> Result<EigencityModel> {
    if samples.len() < k + 1 {
        return Err(nightatlas_core::Error::InsufficientData { needed: k + 1, got: samples.len() }.into());
    }
    if let Some(s) = samples.iter().find(|s| s.label >= classes.len()) {
        bail!("item {} has label index {} outside the class list", s.id, s.label);
    }
    let rows: Vec<Vec<f64>> = samples.par_iter().map(eigencity_features).collect();
    let model = eigencity::fit_eigencities(&rows, k)?;
    let embeddings = samples
        .iter()
        .zip(&rows)
        .map(|(s, r)| Ok((s.id.clone(), s.label, eigencity::project(&model, r)?)))
        .collect::<Result<_>>()?;
    Ok(EigencityModel { classes: classes.to_vec(), model, embeddings })
}

pub fn embeddings_csv(m: &EigencityModel) -> String {
    let k = m.model.k();
    let mut out = String::from("id,label");
    for c in 0..k {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    for (id, label, e) in &m.embeddings {
        out.push_str(&format!("{id},{}", m.classes[*label]));
        for v in &e.0 {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn save_eigencity(dir: &Path, m: &EigencityModel) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join(MODEL_FILE), &eigencity::encode_model(&m.model))?;
    write_atomic(&dir.join(EMBEDDINGS_FILE), embeddings_csv(m).as_bytes())?;
    write_atomic(&dir.join(EIGEN_CLASSES_FILE), serde_json::to_string_pretty(&m.classes)?.as_bytes())?;
    Ok(())
}

pub fn load_eigencity(dir: &Path) -> Result<EigencityModel> {
    let bytes = fs::read(dir.join(MODEL_FILE)).with_context(|| format!("reading {}", dir.join(MODEL_FILE).display()))?;
    let model = eigencity::decode_model(&bytes)?;
    let classes: Vec<String> = serde_json::from_str(&fs::read_to_string(dir.join(EIGEN_CLASSES_FILE))?)?;
    let mut reader = csv::Reader::from_path(dir.join(EMBEDDINGS_FILE))?;
    let mut embeddings = Vec::new();
    for row in reader.records() {
        let row = row?;
        let label = classes.iter().position(|c| c == &row[1]).with_context(|| format!("unknown label `{}`", &row[1]))?;
        let values = row.iter().skip(2).map(|v| v.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>()?;
        if values.len() != model.k() {
            bail!("embedding of {} has {} values, the model has {} components", &row[0], values.len(), model.k());
        }
        embeddings.push((row[0].to_string(), label, Embedding(values)));
    }
    Ok(EigencityModel { classes, model, embeddings })
}

/// Threshold sweep of the cosine vote on `test`. The report class list is
/// the model's classes followed by any extra test labels in `classes`.
pub fn evaluate_eigencity(
    m: &EigencityModel,
    classes: &[String],
    test: &[Sample],
    thresholds: &[f64],
) -> Result<Vec<EvalReport>> {
    if classes.len() < m.classes.len() || classes[..m.classes.len()] != m.classes[..] {
        bail!("report classes must start with the model classes {:?}", m.classes);
    }
    let queries: Vec<(Embedding, usize)> = test
        .par_iter()
        .map(|s| Ok((eigencity::project(&m.model, &eigencity_features(s))?, s.label)))
        .collect::<Result<_>>()?;
    let train: Vec<(Embedding, usize)> = m.embeddings.iter().map(|(_, l, e)| (e.clone(), *l)).collect();
    Ok(eigencity::threshold_sweep(&queries, &train, classes, thresholds)?)
}
