mod common;

use argf_core::data::{generate_synthetic, Split, SyntheticSpec};
use common::nearest_class_mean_accuracy;

#[test]
fn empirical_class_means_converge() {
    let spec = SyntheticSpec {
        num_classes: 4,
        dim: 8,
        count: 10_000,
        seed: 21,
        ..Default::default()
    };
    let bundle = generate_synthetic(&spec).unwrap();
    let means = spec.class_means().unwrap();
    for (c, class_means) in means.iter().enumerate() {
        let rows: Vec<usize> = (0..bundle.count()).filter(|&i| bundle.labels[i] == c).collect();
        let n = rows.len() as f64;
        assert_eq!(rows.len(), 2500);
        for m in 0..3 {
            let mut sq = 0.0;
            for j in 0..spec.dim {
                let mean: f64 = rows.iter().map(|&i| bundle.features[m][[i, j]]).sum::<f64>() / n;
                sq += (mean - class_means[m][j]).powi(2);
            }
            let rms = (sq / spec.dim as f64).sqrt();
            let bound = 3.0 * spec.noise[m] / n.sqrt();
            assert!(rms <= bound, "class {c} modality {m}: rms {rms} > {bound}");
        }
    }
}

#[test]
fn same_spec_same_bundle() {
    let spec = SyntheticSpec {
        count: 300,
        seed: 4,
        ..Default::default()
    };
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    let other = generate_synthetic(&SyntheticSpec { seed: 5, ..spec }).unwrap();
    assert_ne!(generate_synthetic(&spec).unwrap().features, other.features);
}

#[test]
fn nearly_noiseless_data_is_perfectly_separable() {
    let bundle = generate_synthetic(&SyntheticSpec {
        num_classes: 5,
        dim: 4,
        count: 500,
        noise: [1e-9; 3],
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(nearest_class_mean_accuracy(&bundle, Split::Test), 1.0);
}

#[test]
fn labels_are_balanced_and_splits_cover_everything() {
    let bundle = generate_synthetic(&SyntheticSpec {
        num_classes: 3,
        count: 301,
        ..Default::default()
    })
    .unwrap();
    let counts: Vec<usize> = (0..3).map(|c| bundle.labels.iter().filter(|&&l| l == c).count()).collect();
    assert_eq!(counts, vec![101, 100, 100]);
    let total: usize = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| bundle.indices(s).len())
        .sum();
    assert_eq!(total, 301);
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        SyntheticSpec { num_classes: 1, ..Default::default() },
        SyntheticSpec { dim: 0, ..Default::default() },
        SyntheticSpec { count: 0, ..Default::default() },
        SyntheticSpec { noise: [0.5, 0.0, 0.5], ..Default::default() },
        SyntheticSpec { redundancy: 1.5, ..Default::default() },
        SyntheticSpec { separation: f64::NAN, ..Default::default() },
    ] {
        assert!(generate_synthetic(&spec).is_err(), "{spec:?}");
    }
}
