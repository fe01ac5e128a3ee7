//! Central finite-difference checks of the reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of every backward rule it checks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gfn::GfnParams;
use crate::model::{losses, EmbeddingStage, Modality};
use crate::numcore::{Activation, DenseLayer, ParamId, ParamStore, Sequential, Tape, Tensor, Var};
use crate::zoo::{FusionHead, FusionKind, HeadOptions};

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the backward pass of `loss` against central differences for
/// every entry of the parameters in `wrt`. The store is restored on return.
pub fn check<F>(name: &str, store: &mut ParamStore, wrt: &[ParamId], loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        Ok(tape.scalar_value(l))
    };
    let mut worst = 0.0f64;
    let mut entries = 0;
    for &id in wrt {
        let (rows, cols) = store.get(id).dim();
        for ix in (0..rows).flat_map(|r| (0..cols).map(move |c| [r, c])) {
            let orig = store.get(id)[ix];
            store.get_mut(id)[ix] = orig + FD_STEP;
            let plus = eval(store)?;
            store.get_mut(id)[ix] = orig - FD_STEP;
            let minus = eval(store)?;
            store.get_mut(id)[ix] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g[ix]);
            let err = relative_error(a, numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            entries += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        entries,
        max_rel_error: worst,
        passed: worst < MAX_REL_ERROR,
    })
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

/// `Σ R ⊙ y` for a fixed random `R`, so every output entry matters.
fn probe(tape: &mut Tape<'_>, y: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn onehot(labels: &[usize], n: usize) -> Tensor {
    let mut y = Array2::zeros((labels.len(), n));
    for (i, &c) in labels.iter().enumerate() {
        y[[i, c]] = 1.0;
    }
    y
}

/// Problem sizes of the suite: input dim, embedding dim, classes, batch.
const D: usize = 5;
const K: usize = 4;
const N: usize = 3;
const B: usize = 3;

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

/// Runs every finite-difference suite: each layer kind, each model block,
/// each loss, the graph network, every zoo head and the full pipeline.
pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for act in [
        Activation::Linear,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::LeakyRelu,
        Activation::Softmax,
    ] {
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "dense", D, K, act, &mut rng);
        store.get_mut(layer.bias).assign(&uniform(&mut rng, 1, K, 0.5));
        let x = store.add("x", uniform(&mut rng, B, D, 1.0));
        let r = uniform(&mut rng, B, K, 1.0);
        let ids = all_ids(&store);
        out.push(check(&format!("dense/{act:?}"), &mut store, &ids, |t| {
            let xv = t.param(x);
            let y = layer.forward(t, xv)?;
            probe(t, y, &r)
        })?);
    }

    // Embedding-stage blocks and losses share one randomly initialised stage.
    let mut store = ParamStore::new();
    let stage = EmbeddingStage::new(&mut store, D, K, N, Modality::Language, &mut rng);
    for id in stage.all_params() {
        if store.name(id).ends_with(".bias") {
            let shape = store.get(id).dim();
            store.set(id, uniform(&mut rng, shape.0, shape.1, 0.3));
        }
    }
    store.set(stage.adv_weight, Array2::from_elem((1, 1), 1.3));
    let inputs = Modality::ALL.map(|m| store.add(format!("x.{m}"), uniform(&mut rng, B, D, 1.0)));
    let embeds = Modality::ALL.map(|m| store.add(format!("e.{m}"), uniform(&mut rng, B, K, 0.9)));
    let labels: Vec<usize> = (0..B).map(|_| rng.random_range(0..N)).collect();
    let y = onehot(&labels, N);

    let blocks: [(&str, &Sequential, Option<ParamId>, usize, usize); 3] = [
        ("encoder", &stage.encoders[0], Some(inputs[0]), D, K),
        ("decoder", &stage.decoders[1], Some(embeds[1]), K, D),
        ("discriminator", &stage.discriminator, Some(embeds[2]), K, 1),
    ];
    for (name, net, input, _, out_dim) in blocks {
        let r = uniform(&mut rng, B, out_dim, 1.0);
        let mut ids = net.params();
        ids.extend(input);
        out.push(check(name, &mut store, &ids, |t| {
            let x = t.param(input.unwrap());
            let h = net.forward(t, x)?;
            probe(t, h, &r)
        })?);
    }
    {
        let r = uniform(&mut rng, B, N, 1.0);
        let mut ids = stage.classifier_params();
        ids.push(embeds[0]);
        out.push(check("classifier", &mut store, &ids, |t| {
            let e = t.param(embeds[0]);
            let p = stage.classify(t, e)?;
            probe(t, p, &r)
        })?);
    }

    let [s0, s1] = stage.sources();
    let tgt = stage.target;
    let mut adv_ids = stage.discriminator_params();
    adv_ids.push(stage.adv_weight);
    adv_ids.extend(embeds);
    out.push(check("loss/fal", &mut store, &adv_ids, |t| {
        let e = embeds.map(|id| t.param(id));
        stage.loss_fal(t, [e[s0.index()], e[s1.index()]])
    })?);
    out.push(check("loss/tal", &mut store, &adv_ids, |t| {
        let e = embeds.map(|id| t.param(id));
        stage.loss_tal(t, e[tgt.index()], [e[s0.index()], e[s1.index()]])
    })?);

    let mut rec_ids = stage.encoder_params();
    rec_ids.extend(stage.decoder_params());
    out.push(check("loss/rl", &mut store, &rec_ids, |t| {
        let mut recon = Vec::new();
        let mut orig = Vec::new();
        for m in Modality::ALL {
            let x = t.param(inputs[m.index()]);
            let e = stage.encode(t, x, m)?;
            recon.push(stage.decode(t, e, m)?);
            orig.push(x);
        }
        losses::reconstruction(t, &recon, &orig)
    })?);

    let mut cl_ids = stage.encoder_params();
    cl_ids.extend(stage.classifier_params());
    out.push(check("loss/cl", &mut store, &cl_ids, |t| {
        let yv = t.constant(y.clone());
        let mut preds = Vec::new();
        for m in Modality::ALL {
            let x = t.param(inputs[m.index()]);
            let e = stage.encode(t, x, m)?;
            preds.push(stage.classify(t, e)?);
        }
        losses::classification(t, &preds, yv)
    })?);

    let mut p1_ids = rec_ids.clone();
    p1_ids.push(stage.adv_weight);
    out.push(check("loss/phase1", &mut store, &p1_ids, |t| {
        let lambda = 0.3;
        let mut recon = Vec::new();
        let mut orig = Vec::new();
        let mut e = Vec::new();
        for m in Modality::ALL {
            let x = t.param(inputs[m.index()]);
            let em = stage.encode(t, x, m)?;
            recon.push(stage.decode(t, em, m)?);
            orig.push(x);
            e.push(em);
        }
        let rl = losses::reconstruction(t, &recon, &orig)?;
        let fal = stage.loss_fal(t, [e[s0.index()], e[s1.index()]])?;
        let a = t.scale(fal, lambda);
        let b = t.scale(rl, 1.0 - lambda);
        t.add(a, b)
    })?);

    // Graph fusion network blocks.
    for shared in [true, false] {
        let mut store = ParamStore::new();
        let gfn = GfnParams::new(&mut store, K, N, 0.5, shared, &mut rng);
        randomize_biases(&mut store, &mut rng);
        let e = Modality::ALL.map(|m| store.add(format!("e.{m}"), uniform(&mut rng, B, K, 0.9)));
        let tag = if shared { "" } else { "/per-vertex" };

        let r = uniform(&mut rng, B, 1, 1.0);
        let mut ids = gfn.man.params().to_vec();
        ids.push(e[0]);
        out.push(check(&format!("gfn/man{tag}"), &mut store, &ids, |t| {
            let x = t.param(e[0]);
            let a = gfn.man.forward(t, x)?;
            probe(t, a, &r)
        })?);

        let r = uniform(&mut rng, B, K, 1.0);
        let mut ids = gfn.bimodal[0].params();
        ids.extend([e[0], e[1]]);
        out.push(check(&format!("gfn/mlp2{tag}"), &mut store, &ids, |t| {
            let (a, b) = (t.param(e[0]), t.param(e[1]));
            let v = gfn.bimodal_vertex(t, 0, a, b)?;
            probe(t, v, &r)
        })?);
        let mut ids = gfn.trimodal[0].params();
        ids.extend([e[1], e[2]]);
        out.push(check(&format!("gfn/mlp3{tag}"), &mut store, &ids, |t| {
            let (a, b) = (t.param(e[1]), t.param(e[2]));
            let v = gfn.trimodal_vertex(t, 0, a, b)?;
            probe(t, v, &r)
        })?);

        let omega = store.add("omega", uniform(&mut rng, B, 3 * K, 1.0));
        let r = uniform(&mut rng, B, N, 1.0);
        let mut ids = gfn.dec.params();
        ids.push(omega);
        out.push(check(&format!("gfn/dec{tag}"), &mut store, &ids, |t| {
            let o = t.param(omega);
            let m = gfn.dec.forward(t, o)?;
            probe(t, m, &r)
        })?);

        let mut ids = gfn.params();
        ids.extend(e);
        out.push(check(&format!("gfn/mse{tag}"), &mut store, &ids, |t| {
            let ev = e.map(|id| t.param(id));
            let nodes = gfn.forward(t, ev)?;
            let yv = t.constant(y.clone());
            losses::mse(t, nodes.decision, yv)
        })?);
    }

    for kind in FusionKind::ALL {
        let mut store = ParamStore::new();
        let opts = HeadOptions {
            lmf_rank: 3,
            ..Default::default()
        };
        let head = FusionHead::new(kind, &mut store, K, N, opts, &mut rng)?;
        randomize_biases(&mut store, &mut rng);
        if let FusionHead::WeightedAvg { logits, .. } = &head {
            store.set(*logits, uniform(&mut rng, 1, 3, 1.0));
        }
        let e = Modality::ALL.map(|m| store.add(format!("e.{m}"), uniform(&mut rng, B, K, 0.9)));
        let mut ids = head.params();
        ids.extend(e);
        out.push(check(&format!("zoo/{kind}"), &mut store, &ids, |t| {
            let ev = e.map(|id| t.param(id));
            let m = head.fuse(t, ev)?;
            let yv = t.constant(y.clone());
            losses::mse(t, m, yv)
        })?);
    }

    // Raw features → encoders → graph fusion → task loss.
    {
        let mut store = ParamStore::new();
        let stage = EmbeddingStage::new(&mut store, D, K, N, Modality::Language, &mut rng);
        let gfn = GfnParams::new(&mut store, K, N, 0.5, true, &mut rng);
        randomize_biases(&mut store, &mut rng);
        let x = Modality::ALL.map(|_| uniform(&mut rng, B, D, 1.0));
        let mut ids = stage.encoder_params();
        ids.extend(gfn.params());
        out.push(check("model/encoders+gfn+mse", &mut store, &ids, |t| {
            let mut e = Vec::new();
            for m in Modality::ALL {
                let xv = t.constant(x[m.index()].clone());
                e.push(stage.encode(t, xv, m)?);
            }
            let nodes = gfn.forward(t, [e[0], e[1], e[2]])?;
            let yv = t.constant(y.clone());
            losses::mse(t, nodes.decision, yv)
        })?);
    }

    Ok(out)
}

fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".bias"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let (r, c) = store.get(id).dim();
        store.set(id, uniform(rng, r, c, 0.3));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn detects_wrong_gradient() {
        // A detached path hides the dependency from backward but not from
        // the finite differences.
        let mut store = ParamStore::new();
        let x = store.add("x", ndarray::array![[0.7, -0.3]]);
        let res = check("wrong", &mut store, &[x], |t| {
            let v = t.param(x);
            let d = t.detach(v);
            let sq = t.mul(v, d)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(!res.passed);
        assert_eq!(store.get(x), &ndarray::array![[0.7, -0.3]]);
    }

    #[test]
    fn full_suite_passes() {
        let results = run_all(7).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(results.len() >= 25);
    }
}
