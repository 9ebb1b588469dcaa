mod common;

use std::path::Path;

use common::*;
use dakit::data::*;
use dakit::eval::*;
use dakit::nn::Mode;
use dakit::numerics::{Domain, FeatureMatrix};
use dakit::train::{load_scenario, ScenarioKind, ScenarioSpec};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// Writes `root/<class>/<i>.png` with class-dependent colour.
fn image_folder(root: &Path, classes: &[&str], per_class: usize, seed: u64) {
    let mut r = rng(seed);
    for (c, name) in classes.iter().enumerate() {
        std::fs::create_dir_all(root.join(name)).unwrap();
        for i in 0..per_class {
            let img = image::RgbImage::from_fn(12, 12, |x, y| {
                let base = (60 * c) as u8;
                image::Rgb([base.wrapping_add((x * 9) as u8), (y * 13) as u8, r.random::<u8>()])
            });
            img.save(root.join(name).join(format!("{i}.png"))).unwrap();
        }
    }
}

fn image_scenario(root: &Path) -> ScenarioSpec {
    image_folder(&root.join("src"), &["cat", "dog", "fox"], 4, 1);
    image_folder(&root.join("tgt"), &["cat", "dog", "fox"], 3, 2);
    let mut spec = ScenarioSpec {
        kind: ScenarioKind::ImageFolder,
        source_path: Some(root.join("src")),
        target_path: Some(root.join("tgt")),
        ..Default::default()
    };
    spec.preprocess.resize_to = 10;
    spec.preprocess.crop = 8;
    spec
}

#[test]
fn ood_changes_pixels_but_not_labels() {
    let dir = tempfile::tempdir().unwrap();
    let clean_spec = image_scenario(dir.path());
    let clean = load_scenario(&clean_spec, 0).unwrap();
    assert_eq!(clean.image_shape, Some([3, 8, 8]));
    for kind in [OodKind::RandomFlip, OodKind::RandomInvert, OodKind::GaussianBlur, OodKind::RandomErasing] {
        let mut spec = clean_spec.clone();
        spec.ood = Some(OodTransform::new(kind));
        let shifted = load_scenario(&spec, 0).unwrap();
        assert_eq!(shifted.target.labels, clean.target.labels, "{kind:?}");
        assert_eq!(shifted.source.labels, clean.source.labels);
        assert_eq!(shifted.source.all_inputs().unwrap(), clean.source.all_inputs().unwrap());
        assert_ne!(shifted.target.all_inputs().unwrap(), clean.target.all_inputs().unwrap(), "{kind:?}");
    }
}

#[test]
fn subsampling_keeps_each_file_with_its_class() {
    let dir = tempfile::tempdir().unwrap();
    image_folder(dir.path(), &["b", "a", "c"], 5, 3);
    let (m, skipped) = load_image_folder(dir.path()).unwrap();
    assert!(skipped.is_empty());
    assert_eq!(m.class_names, ["a", "b", "c"]);
    for seed in 0..5 {
        let sub = subsample_per_class(&m, 2, seed).unwrap();
        assert_eq!(sub.len(), 6);
        assert_eq!(sub.class_names, m.class_names);
        for e in &sub.entries {
            let original = m.entries.iter().find(|o| o.path == e.path).unwrap();
            assert_eq!(original.class_id, e.class_id);
            assert!(e.path.starts_with(&m.class_names[e.class_id]));
        }
    }
}

#[test]
fn unreadable_files_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    image_folder(dir.path(), &["a"], 2, 4);
    std::fs::write(dir.path().join("a").join("broken.png"), b"not an image").unwrap();
    let (m, skipped) = load_image_folder(dir.path()).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(skipped.len(), 1);
}

#[test]
fn preprocessing_is_a_function_of_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    image_folder(dir.path(), &["a"], 1, 5);
    let img = load_rgb(&dir.path().join("a").join("0.png")).unwrap();
    let spec = PreprocessSpec {
        resize_to: 10,
        crop: 6,
        hflip_prob: 0.5,
        normalization: Normalization::ImageNet,
    };
    for seed in 0..10 {
        assert_eq!(preprocess(&img, &spec, Mode::Train, seed).unwrap(), preprocess(&img, &spec, Mode::Train, seed).unwrap());
        assert_eq!(preprocess(&img, &spec, Mode::Eval, seed).unwrap(), preprocess(&img, &spec, Mode::Eval, 0).unwrap());
    }
    let distinct: std::collections::BTreeSet<String> =
        (0..20).map(|s| format!("{:?}", preprocess(&img, &spec, Mode::Train, s).unwrap())).collect();
    assert!(distinct.len() > 1);
}

#[test]
fn feature_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(8);
    let dump = FeatureDump {
        domains: vec![Domain::Source, Domain::Target, Domain::Source],
        labels: vec![2, 0, 1],
        features: uniform(&mut r, 3, 4, 1.0),
    };
    let path = dir.path().join("f.txt");
    dump.write(&path).unwrap();
    let back = FeatureDump::read(&path).unwrap();
    assert_eq!(back.domains, dump.domains);
    assert_eq!(back.labels, dump.labels);
    assert!((&back.features - &dump.features).iter().all(|v| v.abs() <= 1e-8));
    let src = back.domain_set(Domain::Source, Some(3)).unwrap();
    assert_eq!(src.labels, vec![2, 1]);
}

#[test]
fn a_distance_is_bounded_and_seeded() {
    let mut r = rng(9);
    let a = FeatureMatrix::source(uniform(&mut r, 60, 3, 1.0)).unwrap();
    let b = FeatureMatrix::target(uniform(&mut r, 60, 3, 1.0) + 0.5).unwrap();
    let e1 = a_distance(&a, &b, 4).unwrap();
    assert_eq!(e1, a_distance(&a, &b, 4).unwrap());
    assert!((0.0..=2.0).contains(&e1.value));
    let small = FeatureMatrix::source(Array2::zeros((5, 3))).unwrap();
    assert!(a_distance(&small, &b, 0).is_err());
}

proptest! {
    #[test]
    fn stream_parts_partition_the_samples(n in 1usize..300, k_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let plan = split_stream(n, k, seed).unwrap();
        let parts = plan.parts();
        prop_assert_eq!(parts.len(), k);
        let mut all = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(plan.part_for_epoch(k), parts[0].clone());
    }

    #[test]
    fn metrics_ignore_class_names(seed in any::<u64>(), n in 1usize..60, c in 1usize..6) {
        let mut r = rng(seed);
        let t = random_labels(&mut r, n, c);
        let p = random_labels(&mut r, n, c);
        let perm: Vec<usize> = (0..c).map(|i| (i + 1 + seed as usize % c) % c).collect();
        let (t2, p2): (Vec<usize>, Vec<usize>) = (t.iter().map(|&y| perm[y]).collect(), p.iter().map(|&y| perm[y]).collect());
        let (a, b) = (evaluate(&t, &p).unwrap(), evaluate(&t2, &p2).unwrap());
        prop_assert_eq!(a.accuracy, b.accuracy);
        prop_assert!((a.balanced_accuracy - b.balanced_accuracy).abs() < 1e-12);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        for v in [a.accuracy, a.balanced_accuracy, a.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn balanced_accuracy_equals_accuracy_on_balanced_support(seed in any::<u64>(), per in 1usize..10, c in 1usize..5) {
        let mut r = rng(seed);
        let t: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, per)).collect();
        let p = random_labels(&mut r, t.len(), c);
        prop_assert!((accuracy(&t, &p).unwrap() - balanced_accuracy(&t, &p).unwrap()).abs() < 1e-12);
    }
}
