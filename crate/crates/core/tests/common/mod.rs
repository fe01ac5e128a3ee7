//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use argf_core::data::{generate_synthetic, Split, SyntheticSpec};
use argf_core::{FeatureBundle, ParamStore, RunConfig};

/// Accuracy on `eval` of the rule "predict the class whose training mean
/// (over all three modalities concatenated) is closest".
pub fn nearest_class_mean_accuracy(bundle: &FeatureBundle, eval: Split) -> f64 {
    let d = bundle.dim();
    let n = bundle.num_classes;
    let mut sums = vec![vec![0.0; 3 * d]; n];
    let mut counts = vec![0usize; n];
    for i in bundle.indices(Split::Train) {
        let c = bundle.labels[i];
        counts[c] += 1;
        for m in 0..3 {
            for j in 0..d {
                sums[c][m * d + j] += bundle.features[m][[i, j]];
            }
        }
    }
    for c in 0..n {
        for v in &mut sums[c] {
            *v /= counts[c].max(1) as f64;
        }
    }
    let idx = bundle.indices(eval);
    let mut correct = 0;
    for &i in &idx {
        let mut best = (f64::INFINITY, 0);
        for (c, mean) in sums.iter().enumerate() {
            let mut dist = 0.0;
            for m in 0..3 {
                for j in 0..d {
                    dist += (bundle.features[m][[i, j]] - mean[m * d + j]).powi(2);
                }
            }
            if dist < best.0 {
                best = (dist, c);
            }
        }
        if best.1 == bundle.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / idx.len() as f64
}

/// Explicit `(k+1)³` tensor contraction of a low-rank factorization:
/// `W_n = Σ_r f_a[r,n] ⊗ f_v[r,n] ⊗ f_l[r,n]`, logit `n` = `⟨W_n, z_a ⊗ z_v ⊗ z_l⟩ + b_n`.
/// `factors[m]` is `[rank·N][k+1]` with row `r·N + n`.
pub fn lmf_by_full_tensor(
    factors: [&ndarray::Array2<f64>; 3],
    bias: &ndarray::Array2<f64>,
    rank: usize,
    embeddings: [&ndarray::Array2<f64>; 3],
) -> ndarray::Array2<f64> {
    let n_classes = bias.ncols();
    let k1 = factors[0].ncols();
    let rows = embeddings[0].nrows();
    let z = |m: usize, b: usize, i: usize| if i + 1 == k1 { 1.0 } else { embeddings[m][[b, i]] };
    let mut out = ndarray::Array2::zeros((rows, n_classes));
    for n in 0..n_classes {
        let mut w = vec![0.0; k1 * k1 * k1];
        for r in 0..rank {
            let row = r * n_classes + n;
            for i in 0..k1 {
                for j in 0..k1 {
                    for l in 0..k1 {
                        w[(i * k1 + j) * k1 + l] +=
                            factors[0][[row, i]] * factors[1][[row, j]] * factors[2][[row, l]];
                    }
                }
            }
        }
        for b in 0..rows {
            let mut acc = bias[[0, n]];
            for i in 0..k1 {
                for j in 0..k1 {
                    for l in 0..k1 {
                        acc += w[(i * k1 + j) * k1 + l] * z(0, b, i) * z(1, b, j) * z(2, b, l);
                    }
                }
            }
            out[[b, n]] = acc;
        }
    }
    out
}

/// Names of the parameters that differ between two snapshots.
pub fn changed_names(before: &ParamStore, after: &ParamStore) -> Vec<String> {
    let mut v: Vec<String> = after
        .changed_since(before)
        .into_iter()
        .map(|id| after.name(id).to_string())
        .collect();
    v.sort();
    v
}

pub fn names(store: &ParamStore, ids: &[argf_core::numcore::ParamId]) -> Vec<String> {
    let mut v: Vec<String> = ids.iter().map(|&id| store.name(id).to_string()).collect();
    v.sort();
    v.dedup();
    v
}

/// The synthetic task used by the end-to-end checks: two classes, `d = 16`,
/// 2000 samples.
pub fn acceptance_bundle(seed: u64) -> FeatureBundle {
    generate_synthetic(&SyntheticSpec {
        num_classes: 2,
        dim: 16,
        count: 2000,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Configuration of the end-to-end checks.
pub fn acceptance_config(seed: u64) -> RunConfig {
    RunConfig {
        k: 8,
        lambda: 0.9,
        epochs: 200,
        seed,
        deterministic: true,
        ..Default::default()
    }
}

/// Small, quick configuration for harness plumbing tests.
pub fn quick_config(seed: u64) -> RunConfig {
    RunConfig {
        k: 4,
        epochs: 3,
        batch_size: 32,
        seed,
        deterministic: true,
        ..Default::default()
    }
}

pub fn quick_bundle(seed: u64) -> FeatureBundle {
    generate_synthetic(&SyntheticSpec {
        num_classes: 3,
        dim: 6,
        count: 240,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Diagnostic only: replaces the discriminator of `model` with a freshly
/// initialised one (w = 1), fits it on the frozen embeddings of the training
/// split, and returns its test-split gap. Measures how separable the trained
/// source and target embeddings are to a discriminator that was not part of
/// the game.
pub fn refit_discriminator_gap(model: &argf_core::ArgfModel, bundle: &FeatureBundle, epochs: u64) -> f64 {
    use argf_core::data::batches;
    use argf_core::numcore::{AdamState, Tape};
    let stage = &model.stage;
    let fresh = argf_core::ArgfModel::new(
        RunConfig {
            seed: model.config.seed ^ 0x5eed,
            ..model.config.clone()
        },
        stage.input_dim,
        stage.num_classes,
    )
    .unwrap();
    let mut store = model.store.clone();
    for id in stage.discriminator_params() {
        store.set(id, fresh.store.get(id).clone());
    }
    store.set(stage.adv_weight, ndarray::Array2::from_elem((1, 1), 1.0));
    let mut opt = AdamState::new(1e-3, stage.discriminator_params(), &store);
    for epoch in 0..epochs {
        for b in batches(bundle, Split::Train, 64, epoch) {
            let grads = {
                let mut tape = Tape::new(&store);
                let e = stage.encode_batch(&mut tape, &b).unwrap().map(|v| tape.detach(v));
                let [s0, s1] = stage.sources();
                let tal = stage
                    .loss_tal(&mut tape, e[stage.target.index()], [e[s0.index()], e[s1.index()]])
                    .unwrap();
                tape.backward(tal).unwrap()
            };
            opt.step(&mut store, grads).unwrap();
        }
    }
    let refit = argf_core::ArgfModel {
        store,
        ..model.clone()
    };
    refit.discriminator_gap(&bundle.split_batch(Split::Test)).unwrap()
}
