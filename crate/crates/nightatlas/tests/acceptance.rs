//! Acceptance criteria, one test per criterion. Every test writes a
//! `PASS`/`FAIL` line for itself (and its sub-checks) straight to stderr so
//! the verdicts show up without `--nocapture`.

mod common;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{manifest, png_bytes, DeskFixture, StubServer};
use nalgebra::{DMatrix, SymmetricEigen};
use nightatlas::core::augment::{augment_reference, render_variant, sample_params, AugmentConfig};
use nightatlas::core::eigencity::{classify_vote, fit_pca, project, Embedding};
use nightatlas::core::evalkit::{confusion_matrix, precision_recall};
use nightatlas::core::imgproc::{affine_transform, enhance, AffineParams, Geometry, GrayImage, ThresholdReport};
use nightatlas::core::neuralnet::*;
use nightatlas::core::rng::KeyedRng;
use nightatlas::core::spectral::{fft2d, ifft2d};
use nightatlas::dataio::{fetch_images, subset_by_bbox, BBox, FetchOptions, FetchStatus};
use nightatlas::dataset::LabelledSet;
use nightatlas::harness::{
    evaluate_run, load_checkpoint, predict_samples, save_checkpoint, save_eigencity, train_cnn, train_eigencity, Mode,
    RunDir, Scale, TrainConfig,
};
use nightatlas::synth;

struct Verdict {
    id: u32,
    title: &'static str,
    checks: Vec<(String, bool)>,
}

impl Verdict {
    fn new(id: u32, title: &'static str) -> Self {
        Self { id, title, checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.checks.push((name.into(), ok));
    }

    fn finish(self) {
        let mut err = std::io::stderr().lock();
        let failed: Vec<&str> = self.checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
        for (name, ok) in &self.checks {
            let _ = writeln!(err, "    [{}] criterion {}: {name}", if *ok { "ok" } else { "FAILED" }, self.id);
        }
        let status = if failed.is_empty() { "PASS" } else { "FAIL" };
        let _ = writeln!(err, "{status} criterion {}: {}", self.id, self.title);
        drop(err);
        assert!(failed.is_empty(), "criterion {} failed: {failed:?}", self.id);
    }
}

// ---------------------------------------------------------------------------
// 1. FFT

fn naive_dft(values: &[f64], w: usize, h: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); w * h];
    for v in 0..h {
        for u in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * std::f64::consts::PI * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                    re += values[y * w + x] * a.cos();
                    im += values[y * w + x] * a.sin();
                }
            }
            out[v * w + u] = (re, im);
        }
    }
    out
}

#[test]
fn criterion_01_fft_correctness() {
    let mut v = Verdict::new(1, "FFT matches naive DFT and round-trips on 16x16 grids");
    let start = Instant::now();
    let (mut fwd, mut back) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let mut r = KeyedRng::new(seed, 1);
        let img = GrayImage::from_fn(16, 16, |_, _| r.uniform(-1.0, 1.0));
        let fast = fft2d(&img).unwrap();
        for (a, (re, im)) in fast.data.iter().zip(naive_dft(img.data(), 16, 16)) {
            fwd = fwd.max((a.re - re).abs()).max((a.im - im).abs());
        }
        let round = ifft2d(&fast).unwrap();
        for (a, x) in round.data.iter().zip(img.data()) {
            back = back.max((a.re - x).abs()).max(a.im.abs());
        }
    }
    let elapsed = start.elapsed();
    v.check(format!("max |fft - dft| = {fwd:.3e} < 1e-9"), fwd < 1e-9);
    v.check(format!("max round-trip error = {back:.3e} < 1e-9"), back < 1e-9);
    v.check(format!("runtime {elapsed:?} < 1 s"), elapsed < Duration::from_secs(1));
    v.finish();
}

// ---------------------------------------------------------------------------
// 2. PCA

fn covariance_oracle(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (rows.len(), rows[0].len());
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let eig = SymmetricEigen::new(xc.transpose() * &xc / n as f64);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    (
        order.iter().map(|&i| eig.eigenvalues[i]).collect(),
        order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect(),
    )
}

fn reconstruction_error(rows: &[Vec<f64>], k: usize) -> f64 {
    let model = fit_pca(rows, k).unwrap();
    rows.iter()
        .map(|row| {
            let coeffs = project(&model, row).unwrap().0;
            (0..row.len())
                .map(|j| {
                    let recon: f64 = coeffs.iter().zip(&model.components).map(|(c, comp)| c * comp[j]).sum();
                    (row[j] - model.scaler.mean[j] - recon).powi(2)
                })
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn criterion_02_pca_correctness() {
    let mut v = Verdict::new(2, "snapshot PCA agrees with dense covariance eigendecomposition");
    let (mut val_err, mut vec_err, mut ortho_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut monotone = true;
    for seed in 0..20 {
        let mut r = KeyedRng::new(seed, 2);
        let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..5).map(|_| r.normal()).collect()).collect();
        let model = fit_pca(&rows, 5).unwrap();
        let (vals, vecs) = covariance_oracle(&rows);
        for c in 0..5 {
            val_err = val_err.max((model.explained_variance[c] - vals[c]).abs());
            let comp = &model.components[c];
            let plus = comp.iter().zip(&vecs[c]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let minus = comp.iter().zip(&vecs[c]).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
            vec_err = vec_err.max(plus.min(minus));
            for d in 0..5 {
                let dot: f64 = comp.iter().zip(&model.components[d]).map(|(a, b)| a * b).sum();
                ortho_err = ortho_err.max((dot - if c == d { 1.0 } else { 0.0 }).abs());
            }
        }
        let errs: Vec<f64> = (1..=5).map(|k| reconstruction_error(&rows, k)).collect();
        monotone &= errs.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    }
    v.check(format!("eigenvalue error {val_err:.3e} < 1e-8"), val_err < 1e-8);
    v.check(format!("component error up to sign {vec_err:.3e} < 1e-8"), vec_err < 1e-8);
    v.check(format!("orthonormality error {ortho_err:.3e} < 1e-8"), ortho_err < 1e-8);
    v.check("reconstruction error non-increasing in k", monotone);
    v.finish();
}

// ---------------------------------------------------------------------------
// 3. Gradient checks

const H: f64 = 1e-5;

fn numeric(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let keep = probe[i];
            probe[i] = keep + H;
            let up = f(&probe);
            probe[i] = keep - H;
            let down = f(&probe);
            probe[i] = keep;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn worst_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6)).fold(0.0, f64::max)
}

fn rand_tensor(shape: Vec<usize>, r: &mut KeyedRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0))
}

fn weighted(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn retensor(t: &Tensor<f64>, d: &[f64]) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), d.to_vec()).unwrap()
}

#[test]
fn criterion_03_gradient_checks() {
    let mut v = Verdict::new(3, "analytic gradients match central differences");
    let start = Instant::now();
    let mut r = KeyedRng::new(3, 3);
    let mut worst = [0.0f64; 6];
    for _ in 0..20 {
        // conv
        let (n, c, k) = (1 + r.below(2), 1 + r.below(3), 1 + r.below(3));
        let (side, stride, pad, maps) = (k + 1 + r.below(4), 1 + r.below(2), r.below(2), 1 + r.below(3));
        let x = rand_tensor(vec![n, c, side, side], &mut r);
        let w = rand_tensor(vec![maps, c, k, k], &mut r);
        let b: Vec<f64> = (0..maps).map(|_| r.uniform(-1.0, 1.0)).collect();
        let up = rand_tensor(conv2d_forward(&x, &w, &b, stride, pad).unwrap().shape().to_vec(), &mut r);
        let (gx, gw, gb) = conv2d_backward(&x, &w, &up, stride, pad).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| weighted(&conv2d_forward(x, w, b, stride, pad).unwrap(), &up);
        worst[0] = worst[0]
            .max(worst_rel(gx.data(), &numeric(x.data(), |d| f(&retensor(&x, d), &w, &b))))
            .max(worst_rel(gw.data(), &numeric(w.data(), |d| f(&x, &retensor(&w, d), &b))))
            .max(worst_rel(&gb, &numeric(&b, |d| f(&x, &w, d))));

        // dense
        let (n, i, o) = (1 + r.below(3), 1 + r.below(6), 1 + r.below(5));
        let x = rand_tensor(vec![n, i], &mut r);
        let w = rand_tensor(vec![o, i], &mut r);
        let b: Vec<f64> = (0..o).map(|_| r.uniform(-1.0, 1.0)).collect();
        let up = rand_tensor(vec![n, o], &mut r);
        let (gx, gw, gb) = dense_backward(&x, &w, &up).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| weighted(&dense_forward(x, w, b).unwrap(), &up);
        worst[1] = worst[1]
            .max(worst_rel(gx.data(), &numeric(x.data(), |d| f(&retensor(&x, d), &w, &b))))
            .max(worst_rel(gw.data(), &numeric(w.data(), |d| f(&x, &retensor(&w, d), &b))))
            .max(worst_rel(&gb, &numeric(&b, |d| f(&x, &w, d))));

        // relu, away from the kink
        let shape = vec![1 + r.below(2), 1 + r.below(3), 1 + r.below(4), 1 + r.below(4)];
        let x = Tensor::from_fn(shape.clone(), |_| {
            let m = r.uniform(0.05, 1.0);
            if r.coin() { m } else { -m }
        });
        let up = rand_tensor(shape.clone(), &mut r);
        let g = relu_backward(&x, &up).unwrap();
        worst[2] = worst[2].max(worst_rel(g.data(), &numeric(x.data(), |d| weighted(&relu_forward(&retensor(&x, d)), &up))));

        // flatten
        let upf = rand_tensor(flatten(&x).unwrap().shape().to_vec(), &mut r);
        let g = flatten_backward(&upf, x.shape()).unwrap();
        worst[3] = worst[3].max(worst_rel(g.data(), &numeric(x.data(), |d| weighted(&flatten(&retensor(&x, d)).unwrap(), &upf))));

        // softmax cross-entropy
        let (n, c) = (1 + r.below(4), 2 + r.below(4));
        let logits = Tensor::from_fn(vec![n, c], |_| r.uniform(-3.0, 3.0));
        let labels: Vec<usize> = (0..n).map(|_| r.below(c)).collect();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        worst[4] = worst[4]
            .max(worst_rel(g.data(), &numeric(logits.data(), |d| softmax_cross_entropy(&retensor(&logits, d), &labels).unwrap().0)));
    }
    // L2 over the weights of small networks
    for seed in 0..20u64 {
        let cfg = NetConfig {
            input_side: 6,
            layers: vec![
                LayerSpec::Conv { kernel: 3, stride: 2, pad: 1, maps: 1 + seed as usize % 3 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 + seed as usize % 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 3 },
            ],
            dropout_active: false,
            l2_lambda: 0.01 + 1e-3 * seed as f64,
            class_count: 3,
        };
        let net: Network<f64> = build_network(&cfg, seed).unwrap();
        let (_, grads) = l2_penalty(&net, cfg.l2_lambda);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let num = numeric(net.layers[i].weights().unwrap().0.data(), |d| {
                let mut probe = net.clone();
                if let Layer::Conv { weights, .. } | Layer::Dense { weights, .. } = &mut probe.layers[i] {
                    weights.data_mut().copy_from_slice(d);
                }
                l2_penalty(&probe, cfg.l2_lambda).0
            });
            worst[5] = worst[5].max(worst_rel(g.data(), &num));
        }
    }
    for (name, w) in ["conv", "dense", "relu", "flatten", "softmax cross-entropy", "L2"].iter().zip(worst) {
        v.check(format!("{name}: worst relative error {w:.3e} < 1e-4 over 20 shapes"), w < 1e-4);
    }
    let elapsed = start.elapsed();
    v.check(format!("runtime {elapsed:?} < 30 s"), elapsed < Duration::from_secs(30));
    v.finish();
}

// ---------------------------------------------------------------------------
// 4. Reference arithmetic

/// Unit vector at cosine distance `d` from `(1, 0)`.
fn at_distance(d: f64) -> Embedding {
    let cos = 1.0 - d;
    Embedding(vec![cos, (1.0 - cos * cos).sqrt()])
}

#[test]
fn criterion_04_reference_arithmetic() {
    let mut v = Verdict::new(4, "reference arithmetic pinned exactly");
    let connections = count_dense_connections(&[256, 256, 4]);
    v.check(format!("dense connections [256, 256, 4] = {connections} (66,560)"), connections == 66_560);

    let classes = ["Berlin", "Madrid", "Other", "Paris"];
    let grid = [[3u64, 0, 9, 0], [0, 7, 24, 0], [0, 0, 3063, 0], [0, 0, 5, 8]];
    let mut pairs = Vec::new();
    for (t, row) in grid.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend((0..n).map(|_| (classes[t], Some(classes[p]))));
        }
    }
    let m = precision_recall(&confusion_matrix(&classes, &pairs, false).unwrap());
    let p: Vec<f64> = m.per_class.iter().map(|c| c.precision).collect();
    let r: Vec<f64> = m.per_class.iter().map(|c| c.recall).collect();
    v.check("reference confusion precision Berlin = Madrid = Paris = 1.0", p[0] == 1.0 && p[1] == 1.0 && p[3] == 1.0);
    for (name, got, want) in [("Berlin", r[0], 0.25), ("Madrid", r[1], 0.225806), ("Paris", r[3], 0.615385)] {
        v.check(format!("reference confusion recall {name} = {got:.6} ({want} within 1e-6)"), (got - want).abs() < 1e-6);
    }

    // 100 training embeddings per class; Berlin 50, Paris 20, Madrid 30 under 0.5
    let query = at_distance(0.0);
    let mut train = Vec::new();
    for (label, close) in [(0usize, 50), (1, 30), (2, 20)] {
        for i in 0..100 {
            train.push((at_distance(if i < close { 0.3 } else { 0.8 }), label));
        }
    }
    let vote = classify_vote(&query, &train, 3, 0.5).unwrap();
    v.check(format!("vote 50/20/30 at 0.5 picks Berlin (votes {:?})", vote.votes), vote.label == Some(0));

    let (loss, _) = softmax_cross_entropy(&Tensor::<f64>::zeros(vec![3, 4]), &[0, 1, 2]).unwrap();
    v.check(format!("uniform-logit loss {loss:.6} = ln 4 within 1e-6"), (loss - 4f64.ln()).abs() < 1e-6);

    let sparsity = ThresholdReport::from_counts(26, 5038, 211_977, 272_640).sparsity;
    v.check(format!("sparsity(5038 + 211977, 272640) = {sparsity:.7} (0.796032 within 1e-6)"), (sparsity - 0.796032).abs() < 1e-6);
    v.finish();
}

// ---------------------------------------------------------------------------
// 5. Augmentation invariants

fn cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_nightatlas"))
        .current_dir(dir)
        .args(args)
        .env("NIGHTATLAS_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
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

#[test]
fn criterion_05_augmentation_invariants() {
    use rayon::prelude::*;
    let mut v = Verdict::new(5, "augmentation invariants over 10^3 seeded variants");
    let refs = synth::synth_dataset(10, 1, 55);
    let cfg = AugmentConfig { variants_per_image: 100, master_seed: 8, ..AugmentConfig::default() };
    let variants: Vec<GrayImage> =
        refs.par_iter().flat_map_iter(|r| augment_reference(&r.image, &cfg).unwrap()).collect();
    v.check(format!("{} variants rendered", variants.len()), variants.len() == 1000);
    v.check("every variant is 224x224", variants.iter().all(|g| g.width() == 224 && g.height() == 224));
    v.check("every pixel in [0, 1]", variants.iter().all(|g| g.data().iter().all(|p| (0.0..=1.0).contains(p))));
    let again = augment_reference(&refs[3].image, &cfg).unwrap();
    v.check("re-rendering a reference is identical", again[..] == variants[300..400]);

    let enhanced = enhance(&refs[0].image, &cfg.enhance).unwrap();
    let plain = Geometry::STANDARD.apply(&enhanced).unwrap();
    let identity = augment_reference(&refs[0].image, &AugmentConfig::identity(5)).unwrap();
    v.check("identity config reproduces the un-augmented frame", identity.iter().all(|g| *g == plain));

    let flips_ok = (0..1000u64).all(|i| {
        let p = sample_params(8, i, &cfg);
        let flip = AffineParams { flip_h: p.flip_h, flip_v: p.flip_v, ..AffineParams::identity() };
        affine_transform(&affine_transform(&enhanced, &flip), &flip) == enhanced
    });
    v.check("double flip is an exact involution", flips_ok);

    let narrow = AugmentConfig { rotation_max_deg: 30.0, shift_max_frac: 0.1, shear_max: 0.05, zoom_max_frac: 0.15, ..cfg };
    let in_range = (0..1000u64).all(|i| {
        let p = sample_params(21, i, &narrow);
        p.rotation_deg.abs() <= 30.0
            && p.shift_x_frac.abs() <= 0.1
            && p.shift_y_frac.abs() <= 0.1
            && p.shear.abs() <= 0.05
            && (p.zoom - 1.0).abs() <= 0.15
    });
    v.check("parameter draws stay inside configured ranges", in_range);
    let sample = render_variant(&enhanced, 8, 0, &cfg, &Geometry::STANDARD).unwrap();
    v.check("render_variant agrees with augment_reference", sample == variants[0]);

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    cli(d, &["synth", "--out", "fx", "--classes", "2", "--per-class", "1", "--others", "2", "--test-others", "0", "--seed", "9"]);
    for cwd in ["one", "two"] {
        fs::create_dir(d.join(cwd)).unwrap();
        cli(&d.join(cwd), &["augment", "--list", "../fx/list.csv", "--out", "aug", "--variants", "4", "--other-variants", "2", "--seed", "13"]);
    }
    let (a, b) = (tree(&d.join("one/aug")), tree(&d.join("two/aug")));
    v.check(format!("two processes write byte-identical datasets ({} files)", a.len()), a.len() == 15 && a == b);
    v.finish();
}

// ---------------------------------------------------------------------------
// 6. Adam and dropout

#[test]
fn criterion_06_adam_and_dropout() {
    let mut v = Verdict::new(6, "Adam updates and inverted dropout");
    let mut adam = AdamState::<f64>::new(AdamConfig { learning_rate: 0.1, ..AdamConfig::default() });
    let mut p = vec![1.0, -2.0];
    adam.step(&mut [&mut p[..]], &[&[0.5, 0.0][..]]).unwrap();
    adam.step(&mut [&mut p[..]], &[&[-0.25, 1.0][..]]).unwrap();
    // hand computation with beta1 = 0.9, beta2 = 0.999, eps = 1e-8
    let p1 = 1.0 - 0.1 * (0.05 / 0.1) / ((2.5e-4f64 / 1e-3).sqrt() + 1e-8);
    let p2 = p1 - 0.1 * (0.02 / 0.19) / ((3.1225e-4f64 / 0.001999).sqrt() + 1e-8);
    let q2 = -2.0 - 0.1 * (0.1 / 0.19) / ((1e-3f64 / 0.001999).sqrt() + 1e-8);
    let err = (p[0] - p2).abs().max((p[1] - q2).abs());
    v.check(format!("two-step Adam error {err:.3e} < 1e-12"), err < 1e-12);

    let x = Tensor::from_fn(vec![1, 6], |i| 0.5 + i as f64);
    let mut sums = [0.0f64; 6];
    for s in 0..100_000u64 {
        let (y, _) = dropout_forward(&x, 0.4, Phase::Train { seed: s }).unwrap();
        for (a, b) in sums.iter_mut().zip(y.data()) {
            *a += b;
        }
    }
    let worst = sums.iter().zip(x.data()).map(|(s, e)| (s / 1e5 - e).abs() / e).fold(0.0, f64::max);
    v.check(format!("expectation preserved over 10^5 masks: worst relative deviation {worst:.4} < 0.01"), worst < 0.01);

    let mut r = KeyedRng::new(6, 6);
    let z = Tensor::from_fn(vec![4, 32], |_| r.uniform(-5.0, 5.0));
    let (y, mask) = dropout_forward(&z, 0.4, Phase::Eval).unwrap();
    let bitwise = y.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    v.check("eval-mode dropout is a bitwise identity", bitwise && mask.is_none());
    v.finish();
}

// ---------------------------------------------------------------------------
// 7. Desk-scale learning

#[test]
fn criterion_07_desk_scale_learning() {
    let mut v = Verdict::new(7, "desk-scale synthetic learning and single-batch overfit");
    let start = Instant::now();
    let fixture = DeskFixture::new(3, 200, 11);
    let set = LabelledSet::from_corpus(&fixture.corpus(100, 0.8)).unwrap();
    v.check(
        format!("dataset: {} train + {} validation items over {:?}", set.train.len(), set.validation.len(), set.classes),
        set.train.len() + set.validation.len() == 500 && set.classes.len() == 4,
    );
    let cfg = TrainConfig { mode: Mode::C, epochs: 5, batch_size: 8, learning_rate: Some(1e-3), scale: Scale::Desk, ..TrainConfig::default() };
    let out = train_cnn(&set, &cfg, None).unwrap();
    let accs: Vec<f64> = out.records.iter().map(|r| r.val_accuracy.unwrap()).collect();
    let best = accs.iter().copied().fold(0.0, f64::max);
    v.check(format!("validation accuracy per epoch {accs:.2?}: best {best:.2} >= 0.95 within 5 epochs"), best >= 0.95);

    // 8 items, two per class, unregularized
    let mut batch = Vec::new();
    for c in 0..4 {
        batch.extend(set.train.iter().filter(|s| s.label == c).take(2));
    }
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let data: Vec<f32> = batch.iter().flat_map(|s| s.image.data().iter().map(|&p| p as f32)).collect();
    let x = Tensor::new(vec![8, 1, 64, 64], data).unwrap();
    let overfit_cfg = TrainConfig { mode: Mode::A, ..cfg.clone() };
    let mut net: Network<f32> = build_network(&overfit_cfg.net_config(4), 1).unwrap();
    let mut adam = AdamState::new(overfit_cfg.adam());
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 0..500u64 {
        last = net.train_step(&mut adam, &x, &labels, Phase::Train { seed: step }).unwrap().total();
        if last < 0.01 {
            reached = Some(step + 1);
            break;
        }
    }
    v.check(format!("single batch of 8 reaches loss < 0.01 within 500 steps (steps {reached:?}, loss {last:.5})"), reached.is_some());
    let elapsed = start.elapsed();
    v.check(format!("runtime {elapsed:?} < 10 min"), elapsed < Duration::from_secs(600));
    v.finish();
}

// ---------------------------------------------------------------------------
// 8. Mode contract

#[test]
fn criterion_08_mode_contract() {
    let mut v = Verdict::new(8, "modes A, B and C apply exactly their regularizers");
    let mut r = KeyedRng::new(8, 8);
    let x = Tensor::from_fn(vec![3, 1, 64, 64], |_| r.unit() as f32);
    let labels = [0, 1, 3];
    let phase = Phase::Train { seed: 42 };
    for mode in [Mode::A, Mode::B, Mode::C] {
        let cfg = TrainConfig { mode, scale: Scale::Desk, ..TrainConfig::default() };
        let mut net: Network<f32> = build_network(&cfg.net_config(4), 5).unwrap();
        let train = net.forward(&x, phase).unwrap();
        let eval = net.forward(&x, Phase::Eval).unwrap();
        let masked = train.masks.iter().filter(|m| m.is_some()).count();
        let same_logits = train.logits == eval.logits;
        let mut adam = AdamState::new(cfg.adam());
        let step = net.train_step(&mut adam, &x, &labels, phase).unwrap();
        match mode {
            Mode::A => {
                v.check(format!("A: L2 term is exactly zero ({})", step.l2), step.l2 == 0.0);
                v.check("A: dropout layers are identity", masked == 0 && same_logits);
            }
            Mode::B => {
                v.check(format!("B: L2 term is positive ({:.4})", step.l2), step.l2 > 0.0);
                v.check("B: dropout layers are identity", masked == 0 && same_logits);
            }
            Mode::C => {
                v.check(format!("C: L2 term is positive ({:.4})", step.l2), step.l2 > 0.0);
                v.check(format!("C: dropout masks applied ({masked} layers)"), masked == 2 && !same_logits);
            }
        }
    }
    v.finish();
}

// ---------------------------------------------------------------------------
// 9. Reproducibility

fn full_run(root: &Path, set: &LabelledSet) {
    let run = RunDir::create(root).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 8, learning_rate: Some(1e-3), scale: Scale::Desk, ..TrainConfig::default() };
    train_cnn(set, &cfg, Some(&run)).unwrap();
    let evaluated = evaluate_run(&run, &set.classes, &set.validation, 3, 16).unwrap();
    let reports: Vec<_> = evaluated.into_iter().map(|(r, _)| r).collect();
    for r in &reports {
        nightatlas::report::export_report(r, &run.reports().join(format!("epoch_{}", r.tag.value())), &|_| None).unwrap();
    }
    fs::write(run.reports().join("metrics.csv"), nightatlas::report::metrics_table(&reports)).unwrap();
    let cities = set.classes[..3].to_vec();
    let model = train_eigencity(&cities, &set.restrict(&cities).train, 4).unwrap();
    save_eigencity(&root.join("pca"), &model).unwrap();
}

#[test]
fn criterion_09_reproducibility() {
    let mut v = Verdict::new(9, "identical seeds give byte-identical artifacts; checkpoints round-trip");
    let set = LabelledSet::from_corpus(&DeskFixture::new(3, 12, 31).corpus(10, 0.75)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        full_run(&dir.path().join("a"), &set);
        full_run(&dir.path().join("b"), &set);
    });
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    let kinds = |ext: &str| a.iter().filter(|f| f.0.ends_with(ext)).count();
    v.check(
        format!("{} files compared ({} checkpoints, {} CSVs, {} model files)", a.len(), kinds(".nann"), kinds(".csv"), kinds(".ecpc")),
        kinds(".nann") == 2 && kinds(".ecpc") == 1 && kinds(".csv") >= 6,
    );
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    v.check(format!("all files byte-identical (differing: {differing:?})"), a.len() == b.len() && differing.is_empty());

    let run = RunDir::open(dir.path().join("a")).unwrap();
    let net = load_checkpoint(&run.checkpoint_path(2)).unwrap();
    let copy = dir.path().join("copy.nann");
    save_checkpoint(&copy, &net).unwrap();
    let reloaded = load_checkpoint(&copy).unwrap();
    v.check("save -> load -> save is byte-identical", fs::read(&copy).unwrap() == fs::read(run.checkpoint_path(2)).unwrap());
    v.check(
        "evaluation outputs identical after round-trip",
        predict_samples(&net, &set.validation, 16).unwrap() == predict_samples(&reloaded, &set.validation, 16).unwrap(),
    );
    v.finish();
}

// ---------------------------------------------------------------------------
// 10. Ingestion

#[test]
fn criterion_10_ingestion() {
    let mut v = Verdict::new(10, "stub-server ingestion, warm cache and subset filtering");
    let entries = manifest();
    let gone = entries[3].id.clone();
    let server = StubServer::start(png_bytes(), &[&gone]);
    let cache = tempfile::tempdir().unwrap();
    let opts = FetchOptions { retries: 2, backoff: Duration::from_millis(5), ..FetchOptions::default() };
    let first = fetch_images(&entries, &server.template(), cache.path(), &opts).unwrap();
    let cached_files = entries.iter().filter(|e| nightatlas::dataio::cached_path(cache.path(), &e.id).is_some()).count();
    let missing: Vec<&str> = first.iter().filter(|o| o.status == FetchStatus::Missing).map(|o| o.id.as_str()).collect();
    v.check(format!("{cached_files} cached files after the first run (9)"), cached_files == 9);
    v.check(format!("missing statuses {missing:?} (exactly {gone})"), missing == [gone.as_str()]);
    let hits = server.hits();
    let second = fetch_images(&entries, &server.template(), cache.path(), &opts).unwrap();
    let new_requests = server.hits() - hits;
    v.check(format!("warm-cache rerun issued {new_requests} requests (0)"), new_requests == 0);
    v.check(
        "warm-cache rerun reports 9 cached and 1 missing",
        second.iter().filter(|o| o.status == FetchStatus::Cached).count() == 9
            && second.iter().filter(|o| o.status == FetchStatus::Missing).count() == 1,
    );

    let bbox = BBox { lat_min: 52.3, lat_max: 52.7, lon_min: 13.0, lon_max: 13.6 };
    let exclusions: HashSet<String> = [entries[1].id.clone()].into();
    let once = subset_by_bbox(&entries, &bbox, &exclusions);
    let twice = subset_by_bbox(&once, &bbox, &exclusions);
    let mut reversed = entries.clone();
    reversed.reverse();
    let mut rev = subset_by_bbox(&reversed, &bbox, &exclusions);
    rev.reverse();
    v.check(format!("bbox + exclusion subset has {} entries (4)", once.len()), once.len() == 4);
    v.check("subset filtering is idempotent", once == twice);
    v.check("subset filtering is order independent", once == rev);
    v.finish();
}
