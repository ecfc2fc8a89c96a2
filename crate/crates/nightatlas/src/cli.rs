//! The `nightatlas` command line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use nightatlas_core::augment::{build_sra_dataset, AugmentConfig, Reference};
use nightatlas_core::eigencity::{sweep_csv, threshold_grid};
use nightatlas_core::imgproc::{EnhanceConfig, GrayImage, RgbImage, ThresholdMethod};
use nightatlas_core::rng::derive;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{describe, load_config_file, Resolver, RunConfig, SettingError, Source};
use crate::dataio::{self, FetchOptions};
use crate::dataset::{self, LabelledSet, ListEntry, Role, Sample};
use crate::harness::{self, Mode, RunDir, Scale, TrainConfig};
use crate::report::{self, PROBABILITIES_FILE};
use crate::synth::{self, OTHER_LABEL};
use crate::pngio;

#[derive(Parser, Debug)]
#[command(name = "nightatlas", version, about = "Night-time city image classification from single references")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// JSON file with default settings (flat object or a saved run config).
    #[arg(long, global = true, env = "NIGHTATLAS_CONFIG")]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "NIGHTATLAS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download the images of a manifest into a cache directory.
    Fetch(FetchArgs),
    /// Extract labelled subsets of a manifest by bounding box.
    Subset(SubsetArgs),
    /// Generate a synthetic image set with a matching image list.
    Synth(SynthArgs),
    /// Materialize a single-reference augmentation dataset.
    Augment(AugmentArgs),
    /// Fit the eigencity baseline.
    TrainPca(TrainPcaArgs),
    /// Threshold sweep of the eigencity baseline on a test list.
    EvalPca(EvalPcaArgs),
    /// Train the convolutional classifier.
    TrainCnn(TrainCnnArgs),
    /// Evaluate every checkpoint of a run on a test list.
    EvalCnn(EvalCnnArgs),
    /// Re-render reports of a run from its stored probabilities.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct FetchArgs {
    /// Manifest CSV (id,mission,lat,lon).
    #[arg(long, env = "NIGHTATLAS_MANIFEST")]
    manifest: Option<PathBuf>,
    /// URL with an `{id}` placeholder.
    #[arg(long, env = "NIGHTATLAS_URL_TEMPLATE")]
    url_template: Option<String>,
    #[arg(long, env = "NIGHTATLAS_CACHE")]
    cache: Option<PathBuf>,
    /// Download again even when cached.
    #[arg(long, env = "NIGHTATLAS_FORCE")]
    force: bool,
    #[arg(long, env = "NIGHTATLAS_RETRIES")]
    retries: Option<u32>,
    #[arg(long, env = "NIGHTATLAS_PARALLELISM")]
    parallelism: Option<usize>,
}

#[derive(Args, Debug)]
struct SubsetArgs {
    #[arg(long, env = "NIGHTATLAS_MANIFEST")]
    manifest: Option<PathBuf>,
    /// JSON `{label: {lat_min, lat_max, lon_min, lon_max, exclusions_path}}`.
    #[arg(long, env = "NIGHTATLAS_BBOX_CONFIG")]
    bbox_config: Option<PathBuf>,
    #[arg(long, env = "NIGHTATLAS_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, env = "NIGHTATLAS_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "NIGHTATLAS_CLASSES")]
    classes: Option<usize>,
    /// Frames per class, the first being the reference.
    #[arg(long, env = "NIGHTATLAS_PER_CLASS")]
    per_class: Option<usize>,
    /// Other frames for training.
    #[arg(long, env = "NIGHTATLAS_OTHERS")]
    others: Option<usize>,
    /// Other frames for testing.
    #[arg(long, env = "NIGHTATLAS_TEST_OTHERS")]
    test_others: Option<usize>,
    #[arg(long, env = "NIGHTATLAS_SEED")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Image list CSV (id,label,path,role).
    #[arg(long, env = "NIGHTATLAS_LIST")]
    list: Option<PathBuf>,
    #[arg(long, env = "NIGHTATLAS_OUT")]
    out: Option<PathBuf>,
    /// Variants per labelled reference.
    #[arg(long, env = "NIGHTATLAS_VARIANTS")]
    variants: Option<usize>,
    /// Variants per Other frame.
    #[arg(long, env = "NIGHTATLAS_OTHER_VARIANTS")]
    other_variants: Option<usize>,
    /// Training fraction.
    #[arg(long, env = "NIGHTATLAS_SPLIT")]
    split: Option<f64>,
    #[arg(long, env = "NIGHTATLAS_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "NIGHTATLAS_SPLIT_SEED")]
    split_seed: Option<u64>,
    /// standard (224x224) or desk (64x64).
    #[arg(long, env = "NIGHTATLAS_SCALE")]
    scale: Option<Scale>,
    #[arg(long, env = "NIGHTATLAS_OTHER_LABEL")]
    other_label: Option<String>,
    #[arg(long, env = "NIGHTATLAS_ROTATION_MAX")]
    rotation_max: Option<f64>,
    #[arg(long, env = "NIGHTATLAS_SHIFT_MAX")]
    shift_max: Option<f64>,
    #[arg(long, env = "NIGHTATLAS_SHEAR_MAX")]
    shear_max: Option<f64>,
    #[arg(long, env = "NIGHTATLAS_ZOOM_MAX")]
    zoom_max: Option<f64>,
    /// mean, median, p25 or none.
    #[arg(long, env = "NIGHTATLAS_THRESHOLD")]
    threshold: Option<String>,
}

#[derive(Args, Debug)]
struct TrainPcaArgs {
    /// Directory written by `augment`.
    #[arg(long, env = "NIGHTATLAS_DATA")]
    data: Option<PathBuf>,
    #[arg(long, env = "NIGHTATLAS_RUN")]
    run: Option<String>,
    #[arg(long, env = "NIGHTATLAS_RUNS_DIR")]
    runs_dir: Option<PathBuf>,
    /// Number of eigencities.
    #[arg(long, env = "NIGHTATLAS_K")]
    k: Option<usize>,
    #[arg(long, env = "NIGHTATLAS_OTHER_LABEL")]
    other_label: Option<String>,
}

#[derive(Args, Debug)]
struct EvalPcaArgs {
    #[arg(long, env = "NIGHTATLAS_RUN")]
    run: Option<String>,
    #[arg(long, env = "NIGHTATLAS_RUNS_DIR")]
    runs_dir: Option<PathBuf>,
    /// Image list; items with role `test` are evaluated.
    #[arg(long, env = "NIGHTATLAS_TEST")]
    test: Option<PathBuf>,
    /// start:stop:step
    #[arg(long, env = "NIGHTATLAS_THRESHOLDS")]
    thresholds: Option<String>,
    #[arg(long, env = "NIGHTATLAS_SCALE")]
    scale: Option<Scale>,
    #[arg(long, env = "NIGHTATLAS_OTHER_LABEL")]
    other_label: Option<String>,
    #[arg(long, env = "NIGHTATLAS_THRESHOLD")]
    threshold: Option<String>,
}

#[derive(Args, Debug)]
struct TrainCnnArgs {
    #[arg(long, env = "NIGHTATLAS_DATA")]
    data: Option<PathBuf>,
    #[arg(long, env = "NIGHTATLAS_RUN")]
    run: Option<String>,
    #[arg(long, env = "NIGHTATLAS_RUNS_DIR")]
    runs_dir: Option<PathBuf>,
    /// A (plain), B (L2) or C (L2 and dropout).
    #[arg(long, env = "NIGHTATLAS_MODE")]
    mode: Option<Mode>,
    #[arg(long, env = "NIGHTATLAS_EPOCHS")]
    epochs: Option<u32>,
    #[arg(long, env = "NIGHTATLAS_BATCH")]
    batch: Option<usize>,
    #[arg(long, env = "NIGHTATLAS_LR")]
    lr: Option<f64>,
    #[arg(long, env = "NIGHTATLAS_L2")]
    l2: Option<f64>,
    #[arg(long, env = "NIGHTATLAS_SCALE")]
    scale: Option<Scale>,
    #[arg(long, env = "NIGHTATLAS_SEED")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalCnnArgs {
    #[arg(long, env = "NIGHTATLAS_RUN")]
    run: Option<String>,
    #[arg(long, env = "NIGHTATLAS_RUNS_DIR")]
    runs_dir: Option<PathBuf>,
    #[arg(long, env = "NIGHTATLAS_TEST")]
    test: Option<PathBuf>,
    #[arg(long, env = "NIGHTATLAS_TOP_K")]
    top_k: Option<usize>,
    #[arg(long, env = "NIGHTATLAS_BATCH")]
    batch: Option<usize>,
    #[arg(long, env = "NIGHTATLAS_THRESHOLD")]
    threshold: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, env = "NIGHTATLAS_RUN")]
    run: Option<String>,
    #[arg(long, env = "NIGHTATLAS_RUNS_DIR")]
    runs_dir: Option<PathBuf>,
    #[arg(long, env = "NIGHTATLAS_TOP_K")]
    top_k: Option<usize>,
}

/// Value of argument `id` if it came from the command line or environment.
fn given<T: Clone + Send + Sync + 'static>(m: &ArgMatches, id: &str) -> Option<(T, Source)> {
    let source = match m.value_source(id)? {
        ValueSource::CommandLine => Source::Flag,
        ValueSource::EnvVariable => Source::Env,
        _ => return None,
    };
    m.get_one::<T>(id).cloned().map(|v| (v, source))
}

struct Ctx<'a> {
    m: &'a ArgMatches,
    r: Resolver,
}

impl Ctx<'_> {
    fn get<T>(&mut self, id: &str, default: T) -> Result<T, SettingError>
    where
        T: Clone + Send + Sync + Serialize + DeserializeOwned + 'static,
    {
        let g = given(self.m, id);
        self.r.resolve(id, g, default)
    }

    /// Setting without a default that may stay unset.
    fn maybe<T>(&mut self, id: &str) -> Result<Option<T>, SettingError>
    where
        T: Clone + Send + Sync + Serialize + DeserializeOwned + 'static,
    {
        let g = given::<T>(self.m, id).map(|(v, s)| (Some(v), s));
        self.r.resolve(id, g, None)
    }

    fn need<T>(&mut self, id: &str) -> Result<T, SettingError>
    where
        T: Clone + Send + Sync + Serialize + DeserializeOwned + 'static,
    {
        let g = given(self.m, id);
        self.r.require(id, g)
    }

    fn finish(self) -> RunConfig {
        let cfg = self.r.finish();
        eprint!("{}", describe(&cfg));
        cfg
    }
}

fn threshold_method(s: &str) -> Result<ThresholdMethod, SettingError> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| SettingError(format!("unknown threshold method `{s}` (expected mean, median, p25 or none)")))
}

/// Parses `start:stop:step`.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>, SettingError> {
    let bad = || SettingError(format!("thresholds must look like start:stop:step, got `{spec}`"));
    let parts: Vec<f64> = spec.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let [start, stop, step] = parts[..] else { return Err(bad()) };
    threshold_grid(start, stop, step).map_err(|e| SettingError(e.to_string()))
}

fn enhance_config(method: &str) -> Result<EnhanceConfig, SettingError> {
    Ok(EnhanceConfig { threshold_method: threshold_method(method)?, ..EnhanceConfig::default() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    harness::write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn test_entries(list: &Path) -> Result<Vec<ListEntry>> {
    let entries: Vec<ListEntry> = dataset::read_list(list)?.into_iter().filter(|e| e.role == Role::Test).collect();
    if entries.is_empty() {
        bail!("{} has no items with role `test`", list.display());
    }
    Ok(entries)
}

fn run_fetch(mut c: Ctx) -> Result<()> {
    let manifest: PathBuf = c.need("manifest")?;
    let template: String = c.need("url_template")?;
    let cache: PathBuf = c.get("cache", PathBuf::from("cache"))?;
    let force: bool = c.get("force", false)?;
    let retries: u32 = c.get("retries", 3)?;
    let parallelism: usize = c.get("parallelism", 4)?;
    c.finish();
    let entries = dataio::read_manifest(&manifest)?;
    let opts = FetchOptions { force, retries, parallelism, ..FetchOptions::default() };
    let outcomes = dataio::fetch_images(&entries, &template, &cache, &opts)?;
    let mut status = String::from("id,status\n");
    let mut counts = [0usize; 3];
    for o in &outcomes {
        counts[o.status as usize] += 1;
        status.push_str(&format!("{},{}\n", o.id, serde_json::to_value(o.status)?.as_str().unwrap_or_default()));
    }
    harness::write_atomic(&cache.join("status.csv"), status.as_bytes())?;
    println!("{} cached, {} downloaded, {} missing", counts[0], counts[1], counts[2]);
    Ok(())
}

fn run_subset(mut c: Ctx) -> Result<()> {
    let manifest: PathBuf = c.need("manifest")?;
    let bbox: PathBuf = c.need("bbox_config")?;
    let out: PathBuf = c.need("out")?;
    c.finish();
    let entries = dataio::read_manifest(&manifest)?;
    let config = dataio::load_subset_config(&bbox)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (label, (bbox, exclusions)) in &config.subsets {
        let subset = dataio::subset_by_bbox(&entries, bbox, exclusions);
        dataio::write_manifest(&out.join(format!("{label}.csv")), &subset)?;
        println!("{label}: {} entries", subset.len());
    }
    Ok(())
}

fn run_synth(mut c: Ctx) -> Result<()> {
    let out: PathBuf = c.need("out")?;
    let classes: usize = c.get("classes", 3)?;
    let per_class: usize = c.get("per_class", 10)?;
    let others: usize = c.get("others", 200)?;
    let test_others: usize = c.get("test_others", 20)?;
    let seed: u64 = c.get("seed", 0)?;
    c.finish();
    if classes == 0 || per_class == 0 {
        return Err(SettingError("classes and per_class must be at least 1".into()).into());
    }
    let mut items = synth::synth_dataset(classes, per_class, seed);
    items.extend(synth::synth_others(others + test_others, seed));
    let images = out.join("images");
    fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    items.par_iter().try_for_each(|it| pngio::write_rgb(&images.join(format!("{}.png", it.id)), &it.image))?;
    let mut other_seen = 0;
    let list: Vec<ListEntry> = items
        .iter()
        .map(|it| {
            let role = if it.reference {
                Role::Reference
            } else if it.label == OTHER_LABEL {
                other_seen += 1;
                if other_seen <= others { Role::Other } else { Role::Test }
            } else {
                Role::Test
            };
            ListEntry { id: it.id.clone(), label: it.label.clone(), path: PathBuf::from("images").join(format!("{}.png", it.id)), role }
        })
        .collect();
    dataset::write_list(&out.join("list.csv"), &list)?;
    println!("{} images written to {}", items.len(), out.display());
    Ok(())
}

fn run_augment(mut c: Ctx) -> Result<()> {
    let list: PathBuf = c.need("list")?;
    let out: PathBuf = c.need("out")?;
    let variants: usize = c.get("variants", 100)?;
    let other_variants: usize = c.get("other_variants", 20)?;
    let split: f64 = c.get("split", 0.8)?;
    let seed: u64 = c.get("seed", 0)?;
    let split_seed: u64 = c.get("split_seed", 0)?;
    let scale: Scale = c.get("scale", Scale::Standard)?;
    let other_label: String = c.get("other_label", OTHER_LABEL.to_string())?;
    let defaults = AugmentConfig::default();
    let rotation: f64 = c.get("rotation_max", defaults.rotation_max_deg)?;
    let shift: f64 = c.get("shift_max", defaults.shift_max_frac)?;
    let shear: f64 = c.get("shear_max", defaults.shear_max)?;
    let zoom: f64 = c.get("zoom_max", defaults.zoom_max_frac)?;
    let method: String = c.get("threshold", "mean".to_string())?;
    let enhance = enhance_config(&method)?;
    let cfg = c.finish();
    let class_cfg = AugmentConfig {
        rotation_max_deg: rotation,
        shift_max_frac: shift,
        shear_max: shear,
        zoom_max_frac: zoom,
        enhance,
        variants_per_image: variants,
        master_seed: seed,
        ..defaults
    };
    class_cfg.validate().map_err(|e| SettingError(e.to_string()))?;
    let other_cfg = AugmentConfig { variants_per_image: other_variants, ..class_cfg.clone() };

    let entries = dataset::read_list(&list)?;
    let wanted: Vec<&ListEntry> = entries.iter().filter(|e| matches!(e.role, Role::Reference | Role::Other)).collect();
    let images: Vec<RgbImage> = wanted.par_iter().map(|e| pngio::read_rgb(&e.path)).collect::<Result<_>>()?;
    let mut references = Vec::new();
    let mut others = Vec::new();
    for (e, img) in wanted.iter().zip(&images) {
        match e.role {
            Role::Reference => references.push(Reference { label: &e.label, id: &e.id, image: img }),
            _ => others.push((e.id.as_str(), img)),
        }
    }
    let corpus = build_sra_dataset(&references, &others, &other_label, &class_cfg, &other_cfg, split, split_seed, &scale.geometry())?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("augment.json"), &cfg)?;
    let records = dataset::materialize(&corpus, &out)?;
    println!("{} items ({} classes) written to {}", records.len(), corpus.dataset.classes.len(), out.display());
    Ok(())
}

fn run_dir(runs_dir: &Path, name: &str) -> PathBuf {
    runs_dir.join(name)
}

fn run_train_pca(mut c: Ctx) -> Result<()> {
    let data: PathBuf = c.need("data")?;
    let name: String = c.need("run")?;
    let runs: PathBuf = c.get("runs_dir", PathBuf::from("runs"))?;
    let k: usize = c.get("k", 6)?;
    let other_label: String = c.get("other_label", OTHER_LABEL.to_string())?;
    let cfg = c.finish();
    let run = RunDir::create(run_dir(&runs, &name))?;
    write_json(&run.config(), &cfg)?;
    let set = LabelledSet::load(&data)?;
    let classes: Vec<String> = set.classes.iter().filter(|c| **c != other_label).cloned().collect();
    let labelled = set.restrict(&classes);
    let samples: Vec<Sample> = labelled.train.into_iter().chain(labelled.validation).collect();
    let model = harness::train_eigencity(&classes, &samples, k)?;
    harness::save_eigencity(&run.root, &model)?;
    println!("fitted {k} eigencities on {} items of {} classes", samples.len(), classes.len());
    Ok(())
}

fn load_tests(list: &Path, classes: &[String], method: &str, scale: Scale) -> Result<Vec<Sample>> {
    let entries = test_entries(list)?;
    dataset::prepare_test_images(&entries, classes, &enhance_config(method)?, &scale.geometry())
}

fn run_eval_pca(mut c: Ctx) -> Result<()> {
    let name: String = c.need("run")?;
    let runs: PathBuf = c.get("runs_dir", PathBuf::from("runs"))?;
    let test: PathBuf = c.need("test")?;
    let spec: String = c.get("thresholds", "0:1:0.05".to_string())?;
    let thresholds = parse_thresholds(&spec)?;
    let scale: Scale = c.get("scale", Scale::Standard)?;
    let other_label: String = c.get("other_label", OTHER_LABEL.to_string())?;
    let method: String = c.get("threshold", "mean".to_string())?;
    enhance_config(&method)?;
    let cfg = c.finish();
    let run = RunDir::open(run_dir(&runs, &name))?;
    let model = harness::load_eigencity(&run.root)?;
    let mut classes = model.classes.clone();
    let entries = test_entries(&test)?;
    if entries.iter().any(|e| e.label == other_label) {
        classes.push(other_label.clone());
    }
    let samples = load_tests(&test, &classes, &method, scale)?;
    let reports = harness::evaluate_eigencity(&model, &classes, &samples, &thresholds)?;
    let dir = run.reports().join("pca");
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("eval_config.json"), &cfg)?;
    fs::write(dir.join("sweep.csv"), sweep_csv(&reports))?;
    let cities: Vec<usize> = (0..model.classes.len()).collect();
    fs::write(dir.join("summary.csv"), report::summary_table(&reports, &cities))?;
    for r in &reports {
        report::export_report(r, &dir.join(format!("threshold_{:.2}", r.tag.value().parse::<f64>().unwrap_or(0.0))), &|_| None)?;
    }
    println!("{} thresholds evaluated on {} items", reports.len(), samples.len());
    Ok(())
}

fn run_train_cnn(mut c: Ctx) -> Result<()> {
    let data: PathBuf = c.need("data")?;
    let name: String = c.need("run")?;
    let runs: PathBuf = c.get("runs_dir", PathBuf::from("runs"))?;
    let d = TrainConfig::default();
    let mode: Mode = c.get("mode", d.mode)?;
    let epochs: u32 = c.get("epochs", d.epochs)?;
    let batch: usize = c.get("batch", d.batch_size)?;
    let lr: Option<f64> = c.maybe("lr")?;
    let l2: Option<f64> = c.maybe("l2")?;
    let scale: Scale = c.get("scale", d.scale)?;
    let seed: u64 = c.get("seed", 0)?;
    let cfg = c.finish();
    let train = TrainConfig {
        mode,
        epochs,
        batch_size: batch,
        init_seed: derive(seed, 1),
        shuffle_seed: derive(seed, 2),
        dropout_seed: derive(seed, 3),
        learning_rate: lr,
        l2_lambda: l2,
        scale,
        eval_every_epoch: true,
    };
    train.validate().map_err(|e| SettingError(e.to_string()))?;
    let run = RunDir::create(run_dir(&runs, &name))?;
    write_json(&run.config(), &cfg)?;
    let set = LabelledSet::load(&data)?;
    write_json(&run.root.join("classes.json"), &set.classes)?;
    let outcome = harness::train_cnn(&set, &train, Some(&run))?;
    let last = outcome.records.last().expect("at least one epoch");
    println!("trained {} epochs, final validation accuracy {:.4}", last.epoch, last.val_accuracy.unwrap_or(0.0));
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalCnnConfig {
    test: PathBuf,
    scale: Scale,
    threshold: String,
}

fn export_epochs(
    run: &RunDir,
    reports: &[nightatlas_core::evalkit::EvalReport],
    images: &HashMap<String, GrayImage>,
) -> Result<()> {
    let lookup = |id: &str| images.get(id).cloned();
    for r in reports {
        report::export_report(r, &run.reports().join(format!("epoch_{:03}", r.tag.value().parse::<u32>().unwrap_or(0))), &lookup)?;
    }
    fs::write(run.reports().join("metrics.csv"), report::metrics_table(reports))?;
    let cities: Vec<usize> = reports
        .first()
        .map(|r| r.confusion.classes.iter().enumerate().filter(|(_, c)| *c != OTHER_LABEL).map(|(i, _)| i).collect())
        .unwrap_or_default();
    fs::write(run.reports().join("summary.csv"), report::summary_table(reports, &cities))?;
    Ok(())
}

fn run_eval_cnn(mut c: Ctx) -> Result<()> {
    let name: String = c.need("run")?;
    let runs: PathBuf = c.get("runs_dir", PathBuf::from("runs"))?;
    let test: PathBuf = c.need("test")?;
    let top_k: usize = c.get("top_k", 10)?;
    let batch: usize = c.get("batch", 64)?;
    let method: String = c.get("threshold", "mean".to_string())?;
    enhance_config(&method)?;
    let cfg = c.finish();
    let run = RunDir::open(run_dir(&runs, &name))?;
    let classes: Vec<String> = read_json(&run.root.join("classes.json"))?;
    let trained: RunConfig = read_json(&run.config())?;
    let scale: Scale = trained.settings.get("scale").cloned().map(serde_json::from_value).transpose()?.unwrap_or_default();
    let samples = load_tests(&test, &classes, &method, scale)?;
    let evaluated = harness::evaluate_run(&run, &classes, &samples, top_k, batch.max(1))?;
    write_json(&run.reports().join("eval_config.json"), &cfg)?;
    write_json(&run.reports().join("eval_inputs.json"), &EvalCnnConfig { test, scale, threshold: method })?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    for (r, probs) in &evaluated {
        let dir = run.reports().join(format!("epoch_{:03}", r.tag.value().parse::<u32>().unwrap_or(0)));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(PROBABILITIES_FILE), report::probabilities_csv(&classes, &ids, &labels, probs))?;
    }
    let images: HashMap<String, GrayImage> = samples.into_iter().map(|s| (s.id, s.image)).collect();
    let reports: Vec<_> = evaluated.into_iter().map(|(r, _)| r).collect();
    export_epochs(&run, &reports, &images)?;
    for r in &reports {
        println!("epoch {}: accuracy {:.4}, mean precision {:.4}, mean recall {:.4}", r.tag.value(), r.accuracy, r.metrics.mean_precision, r.metrics.mean_recall);
    }
    Ok(())
}

fn run_report(mut c: Ctx) -> Result<()> {
    let name: String = c.need("run")?;
    let runs: PathBuf = c.get("runs_dir", PathBuf::from("runs"))?;
    let top_k: usize = c.get("top_k", 10)?;
    c.finish();
    let run = RunDir::open(run_dir(&runs, &name))?;
    let mut reports = Vec::new();
    for entry in fs::read_dir(run.reports()).with_context(|| format!("listing {}", run.reports().display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some(epoch) = name.strip_prefix("epoch_").and_then(|e| e.parse::<u32>().ok()) else { continue };
        if path.join(PROBABILITIES_FILE).is_file() {
            let dump = report::read_probabilities(&path.join(PROBABILITIES_FILE))?;
            reports.push(report::report_from_dump(&dump, epoch, top_k)?);
        }
    }
    if reports.is_empty() {
        bail!("no stored probabilities under {}", run.reports().display());
    }
    reports.sort_by_key(|r| r.tag.value().parse::<u32>().unwrap_or(0));
    let inputs = run.reports().join("eval_inputs.json");
    let images: HashMap<String, GrayImage> = if inputs.is_file() {
        let inp: EvalCnnConfig = read_json(&inputs)?;
        let classes = reports[0].confusion.classes.clone();
        load_tests(&inp.test, &classes, &inp.threshold, inp.scale)
            .map(|s| s.into_iter().map(|s| (s.id, s.image)).collect())
            .unwrap_or_else(|e| {
                log::warn!("contact sheets skipped: {e:#}");
                HashMap::new()
            })
    } else {
        HashMap::new()
    };
    export_epochs(&run, &reports, &images)?;
    println!("re-rendered {} epoch reports", reports.len());
    Ok(())
}

fn dispatch(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().ok();
    }
    let file = match &cli.config {
        Some(p) => load_config_file(p)?,
        None => Default::default(),
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let c = Ctx { m: sub, r: Resolver::new(name, file) };
    match cli.command {
        Command::Fetch(_) => run_fetch(c),
        Command::Subset(_) => run_subset(c),
        Command::Synth(_) => run_synth(c),
        Command::Augment(_) => run_augment(c),
        Command::TrainPca(_) => run_train_pca(c),
        Command::EvalPca(_) => run_eval_pca(c),
        Command::TrainCnn(_) => run_train_cnn(c),
        Command::EvalCnn(_) => run_eval_cnn(c),
        Command::Report(_) => run_report(c),
    }
}

/// Runs the command line: 0 on success, 1 on usage errors, 2 on data
/// errors.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<SettingError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
