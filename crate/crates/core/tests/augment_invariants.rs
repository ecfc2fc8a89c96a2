use nightatlas_core::augment::*;
use nightatlas_core::imgproc::{affine_transform, AffineParams, Geometry, GrayImage, RgbImage};
use proptest::prelude::*;

fn frame(seed: u64) -> RgbImage {
    RgbImage::from_fn(640, 426, move |x, y| {
        let v = (((x as u64 * 31 + y as u64 * 17 + seed * 7) % 97) as f64) / 96.0;
        [v, v * 0.8, v * 0.5]
    })
}

#[test]
fn sampled_parameters_are_pinned() {
    let cfg = AugmentConfig::default();
    let a = sample_params(42, 7, &cfg);
    assert_eq!(a, sample_params(42, 7, &cfg));
    assert_ne!(a, sample_params(42, 8, &cfg));
    assert_ne!(a, sample_params(43, 7, &cfg));
    a.validate().unwrap();
}

#[test]
fn draws_stay_in_configured_ranges() {
    let cfg = AugmentConfig { rotation_max_deg: 30.0, shift_max_frac: 0.1, shear_max: 0.05, zoom_max_frac: 0.1, ..AugmentConfig::default() };
    let mut flips = [0usize; 2];
    for i in 0..1000 {
        let p = sample_params(3, i, &cfg);
        assert!(p.rotation_deg.abs() <= 30.0);
        assert!(p.shift_x_frac.abs() <= 0.1 && p.shift_y_frac.abs() <= 0.1);
        assert!(p.shear.abs() <= 0.05);
        assert!((0.9..=1.1).contains(&p.zoom));
        flips[0] += p.flip_h as usize;
        flips[1] += p.flip_v as usize;
    }
    assert!(flips.iter().all(|&f| (400..600).contains(&f)));
}

#[test]
fn identity_config_is_a_no_op() {
    let cfg = AugmentConfig::identity(3);
    for i in 0..3 {
        assert_eq!(sample_params(9, i, &cfg), AffineParams::identity());
    }
    let img = GrayImage::from_fn(5, 4, |x, y| (x + y) as f64 / 8.0);
    assert_eq!(affine_transform(&img, &sample_params(9, 0, &cfg)), img);
}

#[test]
fn variants_have_output_geometry() {
    let cfg = AugmentConfig { variants_per_image: 4, ..AugmentConfig::default() };
    for v in augment_reference(&frame(1), &cfg).unwrap() {
        assert_eq!((v.width(), v.height()), (224, 224));
        assert!(v.data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
    let small = augment_reference_with(&frame(1), &cfg, &Geometry::DESK).unwrap();
    assert_eq!((small[0].width(), small[0].height()), (64, 64));
}

#[test]
fn full_scale_split() {
    let sources: Vec<SourceSpec> = (0..3126).map(|i| SourceSpec::new(format!("o{i}"), 0, 20, 1)).collect();
    let ds = plan_sra_dataset(vec!["Other".into()], sources, 50_000.0 / 62_520.0, 5).unwrap();
    assert_eq!(ds.len(), 62_520);
    assert_eq!(ds.split_indices(Split::Train).len(), 50_000);
    assert_eq!(ds.split_indices(Split::Validation).len(), 12_520);
}

#[test]
fn built_corpus_renders_lazily_and_deterministically() {
    let refs = [frame(1), frame(2)];
    let other = frame(3);
    let references = [
        Reference { label: "a", id: "r1", image: &refs[0] },
        Reference { label: "b", id: "r2", image: &refs[1] },
    ];
    let cfg = AugmentConfig { variants_per_image: 5, ..AugmentConfig::default() };
    let cfg_o = AugmentConfig { variants_per_image: 2, ..AugmentConfig::default() };
    let build = || build_sra_dataset(&references, &[("o1", &other)], "Other", &cfg, &cfg_o, 0.6, 3, &Geometry::DESK).unwrap();
    let (a, b) = (build(), build());
    assert_eq!(a.dataset.classes, vec!["a", "b", "Other"]);
    assert_eq!(a.dataset.len(), 12);
    assert_eq!(a.dataset.manifest(), b.dataset.manifest());
    for i in [0, 7, 11] {
        assert_eq!(a.render(i).unwrap(), b.render(i).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn double_flip_is_identity(seed in any::<u64>(), index in any::<u64>()) {
        let p = sample_params(seed, index, &AugmentConfig::default());
        let flip = AffineParams { flip_h: p.flip_h, flip_v: p.flip_v, ..AffineParams::identity() };
        let img = GrayImage::from_fn(7, 5, |x, y| ((x * 3 + y * 5) % 11) as f64 / 10.0);
        prop_assert_eq!(affine_transform(&affine_transform(&img, &flip), &flip), img);
    }

    #[test]
    fn split_fraction_is_exact(n in 1usize..40, v in 1usize..30, f in 0.05f64..0.95) {
        let classes = vec!["x".to_string(), "y".to_string()];
        let sources: Vec<SourceSpec> = (0..n).map(|i| SourceSpec::new(format!("s{i}"), i % 2, v, 0)).collect();
        let ds = plan_sra_dataset(classes, sources, f, 1).unwrap();
        let total = n * v;
        let train = ds.split_indices(Split::Train).len();
        prop_assert_eq!(ds.len(), total);
        prop_assert!((train as f64 - total as f64 * f).abs() <= 1.0);
    }
}
