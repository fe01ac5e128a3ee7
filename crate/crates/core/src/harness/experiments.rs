use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureBundle, Split};
use crate::error::Result;
use crate::model::Ablations;
use crate::zoo::FusionKind;

use super::train::{train, Trainer};
use super::{evaluate, MetricsReport, RunConfig};

/// Cartesian grid over the searched hyperparameters. An empty axis keeps the
/// base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigGrid {
    pub base: RunConfig,
    pub k: Vec<usize>,
    pub lambda: Vec<f64>,
    pub lr_embedding: Vec<f64>,
    pub lr_gfn: Vec<f64>,
    pub batch_size: Vec<usize>,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl ConfigGrid {
    pub fn points(&self) -> Vec<RunConfig> {
        let b = &self.base;
        let mut out = Vec::new();
        for &k in &axis(&self.k, b.k) {
            for &lambda in &axis(&self.lambda, b.lambda) {
                for &lr_embedding in &axis(&self.lr_embedding, b.lr_embedding) {
                    for &lr_gfn in &axis(&self.lr_gfn, b.lr_gfn) {
                        for &batch_size in &axis(&self.batch_size, b.batch_size) {
                            out.push(RunConfig {
                                k,
                                lambda,
                                lr_embedding,
                                lr_gfn,
                                batch_size,
                                ..b.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    /// 1-based position after ranking.
    pub rank: usize,
    /// Validation-split metrics with the training history.
    pub validation: MetricsReport,
    /// Test-split metrics, present for the top-ranked point only.
    pub test: Option<MetricsReport>,
}

/// Runs `f` over `items` on the rayon pool, or in order when `sequential`.
fn map_maybe_parallel<T, R, F>(items: Vec<T>, sequential: bool, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if sequential {
        items.into_iter().map(f).collect()
    } else {
        items.into_par_iter().map(f).collect()
    }
}

/// Trains every grid point, ranks them by validation accuracy (ties broken
/// by the serialized config) and evaluates only the winner on the test
/// split.
pub fn grid_search(grid: &ConfigGrid, bundle: &FeatureBundle) -> Result<Vec<GridEntry>> {
    let points = grid.points();
    for p in &points {
        p.validate()?;
    }
    let sequential = grid.base.deterministic;
    let fitted = map_maybe_parallel(points, sequential, |cfg| {
        let start = Instant::now();
        let mut trainer = Trainer::new(cfg, bundle)?;
        trainer.fit(bundle)?;
        let outcome = trainer.finish();
        let mut report = evaluate(&outcome.model, bundle, Split::Val)?;
        report.epochs = outcome.epochs.clone();
        report.best_epoch = outcome.best_epoch;
        report.best_val_accuracy = outcome.best_val_accuracy;
        if !sequential {
            report.wall_clock_secs = Some(start.elapsed().as_secs_f64());
        }
        Ok((outcome.model, report))
    });
    let mut fitted = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    let keys: Vec<String> = fitted
        .iter()
        .map(|(m, _)| serde_json::to_string(&m.config).expect("config serializes"))
        .collect();
    let mut order: Vec<usize> = (0..fitted.len()).collect();
    order.sort_by(|&a, &b| {
        fitted[b]
            .1
            .accuracy
            .total_cmp(&fitted[a].1.accuracy)
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    let mut entries = Vec::with_capacity(order.len());
    for (pos, &i) in order.iter().enumerate() {
        let test = if pos == 0 {
            Some(evaluate(&fitted[i].0, bundle, Split::Test)?)
        } else {
            None
        };
        entries.push(GridEntry {
            rank: pos + 1,
            validation: std::mem::replace(&mut fitted[i].1, placeholder_report()),
            test,
        });
    }
    Ok(entries)
}

fn placeholder_report() -> MetricsReport {
    MetricsReport {
        split: Split::Val,
        samples: 0,
        accuracy: 0.0,
        f1_per_class: Vec::new(),
        avg_f1: 0.0,
        confusion: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
        best_val_accuracy: None,
        wall_clock_secs: None,
        config: RunConfig::default(),
        seed: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub report: MetricsReport,
}

fn run_rows(rows: Vec<(String, RunConfig)>, bundle: &FeatureBundle, sequential: bool) -> Result<Vec<TableRow>> {
    for (_, cfg) in &rows {
        cfg.validate()?;
    }
    map_maybe_parallel(rows, sequential, |(name, cfg)| {
        let (_, report) = train(cfg, bundle)?;
        Ok(TableRow { name, report })
    })
    .into_iter()
    .collect()
}

/// The full model and one row per disabled mechanism.
pub fn ablate(config: &RunConfig, bundle: &FeatureBundle) -> Result<Vec<TableRow>> {
    let variants = [
        ("full", Ablations::default()),
        (
            "no_adv",
            Ablations {
                no_adv: true,
                ..Default::default()
            },
        ),
        (
            "no_classifier",
            Ablations {
                no_classifier: true,
                ..Default::default()
            },
        ),
        (
            "no_decoder",
            Ablations {
                no_decoder: true,
                ..Default::default()
            },
        ),
    ];
    let rows = variants
        .into_iter()
        .map(|(name, ablations)| {
            (
                name.to_string(),
                RunConfig {
                    ablations,
                    ..config.clone()
                },
            )
        })
        .collect();
    run_rows(rows, bundle, config.deterministic)
}

/// Every fusion strategy on the same embedding stage configuration.
pub fn compare(config: &RunConfig, bundle: &FeatureBundle) -> Result<Vec<TableRow>> {
    let rows = FusionKind::ALL
        .into_iter()
        .map(|fusion| {
            (
                fusion.as_str().to_string(),
                RunConfig {
                    fusion,
                    ..config.clone()
                },
            )
        })
        .collect();
    run_rows(rows, bundle, config.deterministic)
}

/// Plain-text table of accuracy and F1 per row.
pub fn format_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>8}  {:>6}  {:>6}",
        "model", "accuracy", "avg_f1", "best", "epochs"
    );
    for r in rows {
        let best = r.report.best_epoch.map_or("-".to_string(), |e| e.to_string());
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>6}  {:>6}",
            r.name,
            r.report.accuracy,
            r.report.avg_f1,
            best,
            r.report.epochs.len()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_cover_product() {
        let grid = ConfigGrid {
            k: vec![4, 8],
            lambda: vec![0.1, 0.5, 0.9],
            ..Default::default()
        };
        let pts = grid.points();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p.batch_size == grid.base.batch_size));
        assert_eq!(pts[0].k, 4);
        assert_eq!(pts[5].lambda, 0.9);
    }

    #[test]
    fn empty_grid_is_base() {
        let grid = ConfigGrid::default();
        assert_eq!(grid.points(), vec![grid.base.clone()]);
    }
}
