//! Shared fixtures for the criterion benchmarks.

use argf_core::data::{generate_synthetic, SyntheticSpec};
use argf_core::{ArgfModel, FeatureBundle, FusionKind, ModalityBatch, RunConfig};

/// A default synthetic bundle, a model with embedding size `k` and one batch
/// of `batch` training rows.
pub fn fixture(fusion: FusionKind, k: usize, batch: usize) -> (FeatureBundle, ArgfModel, ModalityBatch) {
    let bundle = generate_synthetic(&SyntheticSpec::default()).expect("default spec is valid");
    let config = RunConfig {
        k,
        fusion,
        batch_size: batch,
        ..Default::default()
    };
    let model = ArgfModel::new(config, bundle.dim(), bundle.num_classes).expect("valid config");
    let idx: Vec<usize> = (0..batch).collect();
    let b = bundle.batch_from_indices(&idx);
    (bundle, model, b)
}
