mod common;

use std::fs;
use std::path::Path;

use common::DeskFixture;
use nightatlas::dataset::LabelledSet;
use nightatlas::harness::{
    evaluate_eigencity, evaluate_run, load_checkpoint, load_eigencity, predict_samples, save_checkpoint, save_eigencity,
    train_cnn, train_eigencity, Mode, RunDir, Scale, TrainConfig,
};
use nightatlas::core::neuralnet::checkpoint;

fn small_set() -> LabelledSet {
    let fixture = DeskFixture::new(3, 12, 31);
    LabelledSet::from_corpus(&fixture.corpus(10, 0.75)).unwrap()
}

fn quick_config(epochs: u32) -> TrainConfig {
    TrainConfig { mode: Mode::C, epochs, batch_size: 8, learning_rate: Some(1e-3), scale: Scale::Desk, ..TrainConfig::default() }
}

#[test]
fn single_epoch_bookkeeping() {
    let set = small_set();
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::create(dir.path().join("runs/one")).unwrap();
    let out = train_cnn(&set, &quick_config(1), Some(&run)).unwrap();
    assert_eq!(out.records.len(), 1);
    let rec = &out.records[0];
    assert_eq!(rec.epoch, 1);
    assert!(rec.val_accuracy.is_some());
    assert_eq!(rec.checkpoint.as_deref(), Some(run.checkpoint_path(1).as_path()));
    let steps = set.train.len().div_ceil(8);
    assert_eq!(out.losses.len(), steps, "the last partial batch is kept");
    assert_eq!(run.list_checkpoints().unwrap(), vec![(1, run.checkpoint_path(1))]);
    let loss = fs::read_to_string(run.curves().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), steps + 1);
    assert!(loss.starts_with("step,epoch,raw_loss,smoothed_loss\n"));
    let acc = fs::read_to_string(run.curves().join("accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 2);
    assert!(run.reports().is_dir());
}

#[test]
fn smoothing_is_applied_on_export_only() {
    let set = small_set();
    let out = train_cnn(&set, &quick_config(1), None).unwrap();
    let csv = nightatlas::harness::loss_curve_csv(&out.losses);
    let mut smooth: Option<f64> = None;
    for (line, sample) in csv.lines().skip(1).zip(&out.losses) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[2], sample.raw_loss);
        let expect = smooth.map_or(sample.raw_loss, |s| 0.6 * s + 0.4 * sample.raw_loss);
        assert!((cols[3] - expect).abs() < 1e-12);
        smooth = Some(expect);
    }
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let set = small_set();
    let out = train_cnn(&set, &quick_config(1), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.nann");
    let b = dir.path().join("b.nann");
    save_checkpoint(&a, &out.network).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(predict_samples(&out.network, &set.validation, 16).unwrap(), predict_samples(&loaded, &set.validation, 16).unwrap());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let set = small_set();
    let out = train_cnn(&set, &quick_config(1), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.nann");
    let bytes = checkpoint::encode(&out.network);
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn train_and_report(root: &Path, set: &LabelledSet) {
    let run = RunDir::create(root).unwrap();
    train_cnn(set, &quick_config(2), Some(&run)).unwrap();
    let evaluated = evaluate_run(&run, &set.classes, &set.validation, 3, 16).unwrap();
    for (report, _) in &evaluated {
        nightatlas::report::export_report(report, &run.reports().join(format!("epoch_{}", report.tag.value())), &|_| None).unwrap();
    }
    let reports: Vec<_> = evaluated.into_iter().map(|(r, _)| r).collect();
    fs::write(run.reports().join("metrics.csv"), nightatlas::report::metrics_table(&reports)).unwrap();
    let cities: Vec<String> = set.classes[..3].to_vec();
    let labelled = set.restrict(&cities);
    let model = train_eigencity(&cities, &labelled.train, 4).unwrap();
    save_eigencity(&root.join("pca"), &model).unwrap();
}

#[test]
fn identical_seeds_give_identical_files() {
    let set = small_set();
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        train_and_report(&dir.path().join("first"), &set);
        train_and_report(&dir.path().join("second"), &set);
    });
    let a = read_tree(&dir.path().join("first"));
    let b = read_tree(&dir.path().join("second"));
    assert!(a.len() >= 8, "{:?}", a.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert_eq!(a.iter().map(|f| &f.0).collect::<Vec<_>>(), b.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn different_seed_changes_the_checkpoint() {
    let set = small_set();
    let a = train_cnn(&set, &quick_config(1), None).unwrap();
    let b = train_cnn(&set, &TrainConfig { init_seed: 77, ..quick_config(1) }, None).unwrap();
    assert_ne!(checkpoint::encode(&a.network), checkpoint::encode(&b.network));
}

#[test]
fn eigencity_model_roundtrip_preserves_sweep() {
    let set = small_set();
    let cities: Vec<String> = set.classes[..3].to_vec();
    let labelled = set.restrict(&cities);
    let model = train_eigencity(&cities, &labelled.train, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_eigencity(dir.path(), &model).unwrap();
    let loaded = load_eigencity(dir.path()).unwrap();
    assert_eq!(loaded, model);
    let thresholds = [0.1, 0.5, 0.9];
    let a = evaluate_eigencity(&model, &set.classes, &set.validation, &thresholds).unwrap();
    let b = evaluate_eigencity(&loaded, &set.classes, &set.validation, &thresholds).unwrap();
    assert_eq!(a, b);
    assert!(train_eigencity(&cities, &labelled.train[..4], 4).is_err());
}

#[test]
fn missing_class_in_validation_is_refused() {
    let mut set = small_set();
    set.validation.retain(|s| s.label != 0);
    assert!(train_cnn(&set, &quick_config(1), None).is_err());
}
