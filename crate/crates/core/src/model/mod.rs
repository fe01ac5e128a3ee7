//! The adversarial joint-embedding stage.
//!
//! Each modality has an encoder `d → k` and a decoder `k → d`. A single
//! discriminator scores embeddings as target-like, and a single classifier
//! (shared by all three modalities) predicts the label from each embedding.
//! [`EmbeddingStage::train_step`] runs the three scoped updates: encoders and
//! decoders on the fake-adversarial and reconstruction losses, the
//! discriminator on the true-adversarial loss, then encoders and classifier on
//! the classification loss.

pub mod losses;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModalityBatch;
use crate::error::{Error, Result};
use crate::numcore::{Activation, AdamState, DenseLayer, ParamId, ParamStore, Sequential, Tape, Var};

/// Bounds applied to the learnable adversarial weight after every update.
pub const ADV_WEIGHT_MIN: f64 = 0.1;
pub const ADV_WEIGHT_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "a")]
    Acoustic,
    #[serde(rename = "v")]
    Visual,
    #[serde(rename = "l")]
    Language,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Acoustic, Modality::Visual, Modality::Language];

    pub fn index(self) -> usize {
        match self {
            Modality::Acoustic => 0,
            Modality::Visual => 1,
            Modality::Language => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Acoustic => "a",
            Modality::Visual => "v",
            Modality::Language => "l",
        }
    }

    /// The two modalities that are not `self`, in `a, v, l` order.
    pub fn others(self) -> [Modality; 2] {
        let mut out = Modality::ALL.into_iter().filter(|m| *m != self);
        [out.next().unwrap(), out.next().unwrap()]
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "acoustic" | "audio" => Ok(Modality::Acoustic),
            "v" | "visual" | "video" => Ok(Modality::Visual),
            "l" | "language" | "text" => Ok(Modality::Language),
            other => Err(Error::UnknownModality(other.to_string())),
        }
    }
}

/// Mechanisms that can be switched off for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_adv: bool,
    pub no_decoder: bool,
    pub no_classifier: bool,
}

/// Loss values of one [`EmbeddingStage::train_step`], each measured before
/// its own update. Skipped terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fal: Option<f64>,
    pub tal: Option<f64>,
    pub rl: Option<f64>,
    pub cl: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn finish(mut self, lambda: f64) -> Self {
        self.total = lambda * self.fal.unwrap_or(0.0)
            + (1.0 - lambda) * self.rl.unwrap_or(0.0)
            + 0.5 * self.tal.unwrap_or(0.0)
            + self.cl.unwrap_or(0.0);
        self
    }

    fn is_finite(&self) -> bool {
        [self.fal, self.tal, self.rl, self.cl]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        write!(
            f,
            "fal={} tal={} rl={} cl={} total={:.6}",
            show(self.fal),
            show(self.tal),
            show(self.rl),
            show(self.cl),
            self.total
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStage {
    pub encoders: [Sequential; 3],
    pub decoders: [Sequential; 3],
    pub discriminator: Sequential,
    pub classifier: DenseLayer,
    pub adv_weight: ParamId,
    pub target: Modality,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl EmbeddingStage {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        embed_dim: usize,
        num_classes: usize,
        target: Modality,
        rng: &mut impl Rng,
    ) -> Self {
        let (d, k) = (input_dim, embed_dim);
        let encoders = Modality::ALL.map(|m| {
            Sequential::new(
                store,
                &format!("encoder.{m}"),
                d,
                &[(k, Activation::LeakyRelu), (k, Activation::Tanh)],
                rng,
            )
        });
        let decoders = Modality::ALL.map(|m| {
            Sequential::new(
                store,
                &format!("decoder.{m}"),
                k,
                &[(k, Activation::LeakyRelu), (d, Activation::Linear)],
                rng,
            )
        });
        let discriminator = Sequential::new(
            store,
            "discriminator",
            k,
            &[(k, Activation::LeakyRelu), (1, Activation::Sigmoid)],
            rng,
        );
        let classifier = DenseLayer::new(store, "classifier", k, num_classes, Activation::Softmax, rng);
        let adv_weight = store.add("adv_weight", ndarray::Array2::ones((1, 1)));
        Self {
            encoders,
            decoders,
            discriminator,
            classifier,
            adv_weight,
            target,
            input_dim,
            embed_dim,
            num_classes,
        }
    }

    pub fn sources(&self) -> [Modality; 2] {
        self.target.others()
    }

    pub fn encode(&self, tape: &mut Tape<'_>, x: Var, m: Modality) -> Result<Var> {
        self.encoders[m.index()].forward(tape, x)
    }

    pub fn decode(&self, tape: &mut Tape<'_>, e: Var, m: Modality) -> Result<Var> {
        self.decoders[m.index()].forward(tape, e)
    }

    /// Probability in `(0, 1)` that each row comes from the target modality.
    pub fn discriminate(&self, tape: &mut Tape<'_>, e: Var) -> Result<Var> {
        self.discriminator.forward(tape, e)
    }

    pub fn classify(&self, tape: &mut Tape<'_>, e: Var) -> Result<Var> {
        self.classifier.forward(tape, e)
    }

    /// Encodes all three modalities of a batch, in `a, v, l` order.
    pub fn encode_batch(&self, tape: &mut Tape<'_>, batch: &ModalityBatch) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for m in Modality::ALL {
            let x = tape.constant(batch.features(m).clone());
            out.push(self.encode(tape, x, m)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Fake-adversarial loss on the two source embeddings.
    pub fn loss_fal(&self, tape: &mut Tape<'_>, sources: [Var; 2]) -> Result<Var> {
        let w = tape.param(self.adv_weight);
        let s0 = self.discriminate(tape, sources[0])?;
        let s1 = self.discriminate(tape, sources[1])?;
        losses::fake_adversarial(tape, w, [s0, s1])
    }

    /// True-adversarial loss on the target embedding and the two sources.
    pub fn loss_tal(&self, tape: &mut Tape<'_>, target: Var, sources: [Var; 2]) -> Result<Var> {
        let w = tape.param(self.adv_weight);
        let t = self.discriminate(tape, target)?;
        let s0 = self.discriminate(tape, sources[0])?;
        let s1 = self.discriminate(tape, sources[1])?;
        losses::true_adversarial(tape, w, t, [s0, s1])
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoders.iter().flat_map(Sequential::params).collect()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoders.iter().flat_map(Sequential::params).collect()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.discriminator.params()
    }

    pub fn classifier_params(&self) -> Vec<ParamId> {
        self.classifier.params().to_vec()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder_params();
        p.extend(self.decoder_params());
        p.extend(self.discriminator_params());
        p.extend(self.classifier_params());
        p.push(self.adv_weight);
        p
    }

    pub fn adv_weight_value(&self, store: &ParamStore) -> f64 {
        store.get(self.adv_weight)[[0, 0]]
    }

    fn clamp_adv_weight(&self, store: &mut ParamStore) {
        store
            .get_mut(self.adv_weight)
            .mapv_inplace(|w| w.clamp(ADV_WEIGHT_MIN, ADV_WEIGHT_MAX));
    }

    /// Phase 1: encoders, decoders and `w` on `λ·fal + (1 − λ)·rl`. Under
    /// `no_adv` only the reconstruction term remains, under `no_decoder` only
    /// the adversarial one; with both set nothing happens. Fills `out.fal`
    /// and `out.rl` with the values before the update.
    pub fn phase_reconstruct(
        &self,
        store: &mut ParamStore,
        opt: &mut AdamState,
        batch: &ModalityBatch,
        lambda: f64,
        ablations: Ablations,
        out: &mut LossBreakdown,
    ) -> Result<()> {
        let use_adv = !ablations.no_adv;
        let use_rec = !ablations.no_decoder;
        if !(use_adv || use_rec) {
            return Ok(());
        }
        let grads = {
            let mut tape = Tape::new(store);
            let e = self.encode_batch(&mut tape, batch)?;
            let mut terms = Vec::new();
            if use_rec {
                let mut recon = Vec::new();
                let mut orig = Vec::new();
                for m in Modality::ALL {
                    recon.push(self.decode(&mut tape, e[m.index()], m)?);
                    orig.push(tape.constant(batch.features(m).clone()));
                }
                let rl = losses::reconstruction(&mut tape, &recon, &orig)?;
                out.rl = Some(tape.scalar_value(rl));
                terms.push(tape.scale(rl, 1.0 - lambda));
            }
            if use_adv {
                let [s0, s1] = self.sources();
                let fal = self.loss_fal(&mut tape, [e[s0.index()], e[s1.index()]])?;
                out.fal = Some(tape.scalar_value(fal));
                terms.push(tape.scale(fal, lambda));
            }
            check_finite(out, lambda)?;
            let loss = tape.add_all(&terms)?;
            tape.backward(loss)?
        };
        opt.step(store, grads)?;
        self.clamp_adv_weight(store);
        Ok(())
    }

    /// Phase 2: discriminator and `w` on `0.5·tal`, with the embeddings
    /// detached so the encoders receive no gradient.
    pub fn phase_discriminate(
        &self,
        store: &mut ParamStore,
        opt: &mut AdamState,
        batch: &ModalityBatch,
        out: &mut LossBreakdown,
    ) -> Result<()> {
        let grads = {
            let mut tape = Tape::new(store);
            let e = self.encode_batch(&mut tape, batch)?;
            let e = e.map(|v| tape.detach(v));
            let [s0, s1] = self.sources();
            let tal = self.loss_tal(&mut tape, e[self.target.index()], [e[s0.index()], e[s1.index()]])?;
            out.tal = Some(tape.scalar_value(tal));
            check_finite(out, 0.0)?;
            let loss = tape.scale(tal, 0.5);
            tape.backward(loss)?
        };
        opt.step(store, grads)?;
        self.clamp_adv_weight(store);
        Ok(())
    }

    /// Phase 3: encoders and classifier on `cl`.
    pub fn phase_classify(
        &self,
        store: &mut ParamStore,
        opt: &mut AdamState,
        batch: &ModalityBatch,
        out: &mut LossBreakdown,
    ) -> Result<()> {
        let grads = {
            let mut tape = Tape::new(store);
            let e = self.encode_batch(&mut tape, batch)?;
            let preds = e
                .iter()
                .map(|v| self.classify(&mut tape, *v))
                .collect::<Result<Vec<_>>>()?;
            let y = tape.constant(batch.onehot.clone());
            let cl = losses::classification(&mut tape, &preds, y)?;
            out.cl = Some(tape.scalar_value(cl));
            check_finite(out, 0.0)?;
            tape.backward(cl)?
        };
        opt.step(store, grads)
    }

    /// One batch of the three scoped updates. `lambda` trades the
    /// fake-adversarial loss against reconstruction in the first phase.
    pub fn train_step(
        &self,
        store: &mut ParamStore,
        opt: &mut StageOptimizers,
        batch: &ModalityBatch,
        lambda: f64,
        ablations: Ablations,
    ) -> Result<LossBreakdown> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidConfig(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        let mut out = LossBreakdown::default();
        self.phase_reconstruct(store, &mut opt.reconstruct, batch, lambda, ablations, &mut out)?;
        if !ablations.no_adv {
            self.phase_discriminate(store, &mut opt.discriminator, batch, &mut out)?;
        }
        if !ablations.no_classifier {
            self.phase_classify(store, &mut opt.classify, batch, &mut out)?;
        }
        Ok(out.finish(lambda))
    }
}

fn check_finite(losses: &LossBreakdown, lambda: f64) -> Result<()> {
    if losses.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite loss: {}", losses.finish(lambda))))
    }
}

/// One Adam instance per phase, each scoped to the parameters that phase may
/// change.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageOptimizers {
    pub reconstruct: AdamState,
    pub discriminator: AdamState,
    pub classify: AdamState,
}

impl StageOptimizers {
    pub fn new(stage: &EmbeddingStage, store: &ParamStore, lr: f64) -> Self {
        let mut phase1 = stage.encoder_params();
        phase1.extend(stage.decoder_params());
        phase1.push(stage.adv_weight);
        let mut phase2 = stage.discriminator_params();
        phase2.push(stage.adv_weight);
        let mut phase3 = stage.encoder_params();
        phase3.extend(stage.classifier_params());
        Self {
            reconstruct: AdamState::new(lr, phase1, store),
            discriminator: AdamState::new(lr, phase2, store),
            classify: AdamState::new(lr, phase3, store),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stage(d: usize, k: usize, n: usize) -> (ParamStore, EmbeddingStage) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let st = EmbeddingStage::new(&mut store, d, k, n, Modality::Language, &mut rng);
        (store, st)
    }

    fn random_batch(d: usize, n: usize, b: usize, seed: u64) -> ModalityBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Modality::ALL.map(|_| Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0)));
        let labels = (0..b).map(|i| i % n).collect();
        ModalityBatch::new(features, labels, n)
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("l".parse::<Modality>().unwrap(), Modality::Language);
        assert_eq!(Modality::Language.others(), [Modality::Acoustic, Modality::Visual]);
        assert!(matches!("x".parse::<Modality>(), Err(Error::UnknownModality(_))));
    }

    #[test]
    fn encode_shape_and_determinism() {
        let (store, st) = stage(16, 8, 2);
        let batch = random_batch(16, 2, 4, 1);
        let run = || {
            let mut tape = Tape::new(&store);
            let x = tape.constant(batch.features(Modality::Acoustic).clone());
            let e = st.encode(&mut tape, x, Modality::Acoustic).unwrap();
            tape.value(e).clone()
        };
        let a = run();
        assert_eq!(a.dim(), (4, 8));
        assert_eq!(a, run());
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let (mut store, st) = stage(16, 8, 2);
        st.encoders[0].zero(&mut store);
        let batch = random_batch(16, 2, 4, 2);
        let mut tape = Tape::new(&store);
        let x = tape.constant(batch.features(Modality::Acoustic).clone());
        let e = st.encode(&mut tape, x, Modality::Acoustic).unwrap();
        assert!(tape.value(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_shapes_and_k_mismatch() {
        let (mut store, st) = stage(16, 8, 2);
        st.decoders[1].zero(&mut store);
        let mut tape = Tape::new(&store);
        let e = tape.constant(Array2::from_elem((4, 8), 0.3));
        let r = st.decode(&mut tape, e, Modality::Visual).unwrap();
        assert_eq!(tape.shape(r), [4, 16]);
        assert!(tape.value(r).iter().all(|&v| v == 0.0));
        let bad = tape.constant(Array2::zeros((4, 7)));
        assert!(matches!(
            st.decode(&mut tape, bad, Modality::Visual),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn discriminator_range() {
        let (mut store, st) = stage(4, 3, 2);
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = tape.constant(Array2::from_shape_fn((6, 3), |_| rng.random_range(-1e3..1e3)));
        let d = st.discriminate(&mut tape, e).unwrap();
        assert_eq!(tape.shape(d), [6, 1]);
        assert!(tape.value(d).iter().all(|&v| v > 0.0 && v < 1.0));
        drop(tape);
        st.discriminator.zero(&mut store);
        let mut tape = Tape::new(&store);
        let e = tape.constant(Array2::from_elem((2, 3), 4.0));
        let d = st.discriminate(&mut tape, e).unwrap();
        assert!(tape.value(d).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classifier_rows() {
        let (mut store, st) = stage(4, 3, 2);
        let mut tape = Tape::new(&store);
        let e = tape.constant(Array2::from_elem((5, 3), 0.2));
        let y = st.classify(&mut tape, e).unwrap();
        assert_eq!(tape.shape(y), [5, 2]);
        for row in tape.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        drop(tape);
        st.classifier.zero(&mut store);
        let mut tape = Tape::new(&store);
        let e = tape.constant(Array2::from_elem((1, 3), 0.2));
        let y = st.classify(&mut tape, e).unwrap();
        assert_eq!(tape.value(y), &ndarray::array![[0.5, 0.5]]);
    }

    #[test]
    fn phase_scopes() {
        let (mut store, st) = stage(5, 3, 2);
        let mut opt = StageOptimizers::new(&st, &store, 0.01);
        let batch = random_batch(5, 2, 3, 9);
        let before = store.clone();
        st.train_step(&mut store, &mut opt, &batch, 0.5, Ablations::default())
            .unwrap();
        let changed = store.changed_since(&before);
        for id in st.all_params() {
            // every parameter group takes part in some phase
            assert!(changed.contains(&id) || id == st.adv_weight, "{}", store.name(id));
        }
    }

    #[test]
    fn lambda_out_of_range_rejected() {
        let (mut store, st) = stage(5, 3, 2);
        let mut opt = StageOptimizers::new(&st, &store, 0.01);
        let batch = random_batch(5, 2, 3, 9);
        assert!(st
            .train_step(&mut store, &mut opt, &batch, 1.5, Ablations::default())
            .is_err());
    }

    #[test]
    fn no_adv_skips_adversarial_terms() {
        let (mut store, st) = stage(5, 3, 2);
        let mut opt = StageOptimizers::new(&st, &store, 0.01);
        let batch = random_batch(5, 2, 3, 4);
        let before = store.clone();
        let ab = Ablations {
            no_adv: true,
            ..Default::default()
        };
        let l = st.train_step(&mut store, &mut opt, &batch, 0.5, ab).unwrap();
        assert!(l.fal.is_none() && l.tal.is_none());
        let changed = store.changed_since(&before);
        for id in st.discriminator_params() {
            assert!(!changed.contains(&id));
        }
    }
}
