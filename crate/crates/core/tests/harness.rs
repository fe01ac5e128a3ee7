mod common;

use std::fs;

use argf_core::data::Split;
use argf_core::harness::{
    ablate, compare, evaluate, export_embeddings, export_graph_weights, grid_search, train, ConfigGrid, Trainer,
};
use argf_core::zoo::FusionKind;
use argf_core::{ArgfModel, Error, FeatureBundle, RunConfig};
use common::{quick_bundle, quick_config};
use tempfile::TempDir;

fn read_csv(path: &std::path::Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn zero_epochs_reports_the_untrained_model() {
    let b = quick_bundle(1);
    let cfg = RunConfig { epochs: 0, ..quick_config(1) };
    let (model, report) = train(cfg.clone(), &b).unwrap();
    let fresh = ArgfModel::new(cfg, b.dim(), b.num_classes).unwrap();
    assert_eq!(model.store, fresh.store);
    assert!(report.epochs.is_empty());
    assert_eq!(report.best_epoch, None);
    assert_eq!(report.accuracy, evaluate(&fresh, &b, Split::Test).unwrap().accuracy);
    assert_eq!(report.samples, b.indices(Split::Test).len());
}

#[test]
fn history_has_one_record_per_epoch() {
    let b = quick_bundle(2);
    let (_, report) = train(quick_config(2), &b).unwrap();
    assert_eq!(report.epochs.len(), 3);
    for (i, r) in report.epochs.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert!(r.val_accuracy.is_some());
        assert!(r.task_mse.is_finite());
    }
    let total: u64 = report.confusion.iter().flatten().sum();
    assert_eq!(total as usize, report.samples);
}

#[test]
fn singleton_grid_matches_plain_training() {
    let b = quick_bundle(3);
    let cfg = quick_config(3);
    let entries = grid_search(&ConfigGrid { base: cfg.clone(), ..Default::default() }, &b).unwrap();
    assert_eq!(entries.len(), 1);
    let (_, report) = train(cfg, &b).unwrap();
    let test = entries[0].test.as_ref().unwrap();
    assert_eq!(test.confusion, report.confusion);
    assert_eq!(test.avg_f1, report.avg_f1);
    assert_eq!(test.config, report.config);
    let val = &entries[0].validation;
    assert_eq!(val.split, Split::Val);
    assert_eq!(val.epochs, report.epochs);
    assert_eq!(val.best_epoch, report.best_epoch);
}

#[test]
fn duplicate_grid_points_give_identical_reports() {
    let b = quick_bundle(4);
    let grid = ConfigGrid {
        base: quick_config(4),
        k: vec![3, 3],
        ..Default::default()
    };
    let e = grid_search(&grid, &b).unwrap();
    assert_eq!(e.len(), 2);
    assert_eq!(e[0].validation, e[1].validation);
    assert!(e[0].test.is_some() && e[1].test.is_none());
}

#[test]
fn grid_ranking_ignores_enumeration_order() {
    let b = quick_bundle(5);
    let grid = |k: Vec<usize>, lambda: Vec<f64>| ConfigGrid {
        base: quick_config(5),
        k,
        lambda,
        ..Default::default()
    };
    let a = grid_search(&grid(vec![2, 4], vec![0.2, 0.7]), &b).unwrap();
    let z = grid_search(&grid(vec![4, 2], vec![0.7, 0.2]), &b).unwrap();
    assert_eq!(a, z);
    assert!(a.windows(2).all(|w| w[0].validation.accuracy >= w[1].validation.accuracy));
    assert_eq!(a.iter().map(|e| e.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn parallel_grid_matches_sequential() {
    let b = quick_bundle(6);
    let mut grid = ConfigGrid {
        base: quick_config(6),
        k: vec![2, 3, 4],
        ..Default::default()
    };
    let seq = grid_search(&grid, &b).unwrap();
    grid.base.deterministic = false;
    let par = grid_search(&grid, &b).unwrap();
    assert_eq!(seq.len(), par.len());
    for (s, p) in seq.iter().zip(&par) {
        assert_eq!(s.validation.accuracy, p.validation.accuracy);
        assert_eq!(s.validation.confusion, p.validation.confusion);
        assert_eq!(s.validation.config.k, p.validation.config.k);
    }
}

#[test]
fn embedding_export_has_one_row_per_sample() {
    let b = quick_bundle(7);
    let (model, _) = train(quick_config(7), &b).unwrap();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("emb.csv");
    export_embeddings(&model, &b, &p).unwrap();
    let rows = read_csv(&p);
    assert_eq!(rows.len(), b.count());
    let k = model.config.k;
    let emb = model.embed(&b.all()).unwrap();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 3 * k + 1);
        assert_eq!(row[3 * k], b.labels[i] as f64);
        for m in 0..3 {
            for j in 0..k {
                assert_eq!(row[m * k + j], emb[m][[i, j]]);
            }
        }
    }
}

#[test]
fn graph_export_rows_are_weight_distributions() {
    let b = quick_bundle(8);
    let (model, _) = train(quick_config(8), &b).unwrap();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("graph.csv");
    let n = export_graph_weights(&model, &b, Split::Test, &p).unwrap();
    let rows = read_csv(&p);
    assert_eq!(rows.len(), n);
    assert_eq!(n, b.indices(Split::Test).len());
    for row in rows {
        assert_eq!(row.len(), 12);
        assert!((row[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((row[6..12].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn graph_export_needs_the_graph_head() {
    let b = quick_bundle(9);
    let cfg = RunConfig {
        fusion: FusionKind::ConcatFc,
        ..quick_config(9)
    };
    let model = ArgfModel::new(cfg, b.dim(), b.num_classes).unwrap();
    let dir = TempDir::new().unwrap();
    let err = export_graph_weights(&model, &b, Split::Test, &dir.path().join("g.csv")).unwrap_err();
    assert!(matches!(err, Error::NotGfn), "{err:?}");
}

fn blown_up(b: &FeatureBundle) -> FeatureBundle {
    let mut huge = b.clone();
    for f in &mut huge.features {
        f.mapv_inplace(|x| x * 1e200);
    }
    huge
}

#[test]
fn divergence_keeps_the_last_good_parameters() {
    let b = quick_bundle(10);
    let cfg = RunConfig { epochs: 1, ..quick_config(10) };
    let mut t = Trainer::new(cfg.clone(), &b).unwrap();
    t.fit(&b).unwrap();
    let good = t.finish().model;

    let mut t = Trainer::from_model(good.clone());
    let err = t.fit(&blown_up(&b)).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err:?}");
    assert_eq!(t.model().store, good.store);

    let mut fresh = Trainer::new(cfg.clone(), &b).unwrap();
    assert!(matches!(fresh.fit(&blown_up(&b)), Err(Error::Divergence(_))));
    assert_eq!(fresh.model().store, ArgfModel::new(cfg, b.dim(), b.num_classes).unwrap().store);
}

#[test]
fn ablations_leave_their_components_untouched() {
    let b = quick_bundle(11);
    let cases: [(&str, fn(&mut RunConfig)); 3] = [
        ("no_adv", |c| c.ablations.no_adv = true),
        ("no_decoder", |c| c.ablations.no_decoder = true),
        ("no_classifier", |c| c.ablations.no_classifier = true),
    ];
    for (name, apply) in cases {
        let mut cfg = quick_config(11);
        apply(&mut cfg);
        let init = ArgfModel::new(cfg.clone(), b.dim(), b.num_classes).unwrap();
        let (model, _) = train(cfg, &b).unwrap();
        let s = &model.stage;
        let frozen = match name {
            "no_adv" => {
                let mut v = s.discriminator_params();
                v.push(s.adv_weight);
                v
            }
            "no_decoder" => s.decoder_params(),
            _ => s.classifier_params(),
        };
        for id in frozen {
            assert_eq!(model.store.get(id), init.store.get(id), "{name}: {}", model.store.name(id));
        }
        assert_ne!(model.store.get(s.encoder_params()[0]), init.store.get(s.encoder_params()[0]), "{name}");
    }
}

#[test]
fn ablation_and_comparison_tables_are_complete() {
    let b = quick_bundle(12);
    let cfg = RunConfig { epochs: 1, ..quick_config(12) };
    let rows = ablate(&cfg, &b).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["full", "no_adv", "no_classifier", "no_decoder"]);
    let rows = compare(&cfg, &b).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    let expected: Vec<&str> = FusionKind::ALL.iter().map(|k| k.as_str()).collect();
    assert_eq!(names, expected);
    for r in &rows {
        assert_eq!(r.report.split, Split::Test);
        assert_eq!(r.report.epochs.len(), 1);
    }
}

#[test]
fn saved_models_reload_identically() {
    let b = quick_bundle(13);
    let (model, _) = train(quick_config(13), &b).unwrap();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("model.json");
    model.save(&p).unwrap();
    let back = ArgfModel::load(&p).unwrap();
    assert_eq!(back.store, model.store);
    assert_eq!(back.predict(&b.all()).unwrap(), model.predict(&b.all()).unwrap());
}

#[test]
fn mismatched_input_width_is_rejected() {
    let b = quick_bundle(14);
    let model = ArgfModel::new(quick_config(14), b.dim() + 1, b.num_classes).unwrap();
    assert!(evaluate(&model, &b, Split::Test).is_err());
}
