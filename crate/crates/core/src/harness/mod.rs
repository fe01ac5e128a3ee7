//! Training loop, evaluation, experiment tables and exports.

mod experiments;
mod export;
pub mod metrics;
mod train;

use std::fs;
use std::path::Path;

use ndarray::{concatenate, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureBundle, ModalityBatch, Split};
use crate::error::{Error, Result};
use crate::gfn::{GfnGraph, DEFAULT_SIMILARITY_OFFSET};
use crate::model::{Ablations, EmbeddingStage, LossBreakdown, Modality};
use crate::numcore::{ParamStore, Tape, Tensor};
use crate::zoo::{FusionHead, FusionKind, HeadOptions};

pub use experiments::{ablate, compare, format_table, grid_search, ConfigGrid, GridEntry, TableRow};
pub use export::{export_embeddings, export_graph_weights};
pub use metrics::Confusion;
pub use train::{train, FitOutcome, Trainer};

/// Rows per forward pass when evaluating a whole split.
pub const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Embedding dimension.
    pub k: usize,
    pub lambda: f64,
    pub lr_embedding: f64,
    pub lr_gfn: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub target_modality: Modality,
    pub fusion: FusionKind,
    pub ablations: Ablations,
    pub seed: u64,
    /// Constant added to the parent similarity in the vertex-weight
    /// denominator.
    pub similarity_offset: f64,
    pub lmf_rank: usize,
    /// Whether the task-loss update also moves the encoders.
    pub update_encoders_in_task: bool,
    /// One set of MLP weights per graph layer instead of one per vertex.
    pub shared_vertex_params: bool,
    /// Sequential grid search and no wall-clock field, so repeated runs
    /// serialize to identical bytes.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 50,
            lambda: 0.5,
            lr_embedding: 1e-3,
            lr_gfn: 1e-3,
            batch_size: 64,
            epochs: 200,
            patience: 20,
            target_modality: Modality::Language,
            fusion: FusionKind::Gfn,
            ablations: Ablations::default(),
            seed: 0,
            similarity_offset: DEFAULT_SIMILARITY_OFFSET,
            lmf_rank: 4,
            update_encoders_in_task: true,
            shared_vertex_params: true,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        for (name, lr) in [("lr_embedding", self.lr_embedding), ("lr_gfn", self.lr_gfn)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.similarity_offset.is_finite() && self.similarity_offset > 0.0) {
            return bad(format!("similarity_offset must be positive, got {}", self.similarity_offset));
        }
        if self.lmf_rank == 0 {
            return bad("lmf_rank must be at least 1".into());
        }
        if self.fusion == FusionKind::Tensor && self.k > crate::zoo::TENSOR_FUSION_MAX_K {
            return Err(Error::TensorFusionTooLarge(self.k));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    fn head_options(&self) -> HeadOptions {
        HeadOptions {
            similarity_offset: self.similarity_offset,
            shared_vertex_params: self.shared_vertex_params,
            lmf_rank: self.lmf_rank,
        }
    }
}

/// Embedding stage plus fusion head, with all parameters in one store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArgfModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub stage: EmbeddingStage,
    pub head: FusionHead,
}

impl ArgfModel {
    pub fn new(config: RunConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let stage = EmbeddingStage::new(
            &mut store,
            input_dim,
            config.k,
            num_classes,
            config.target_modality,
            &mut rng,
        );
        let head = FusionHead::new(
            config.fusion,
            &mut store,
            config.k,
            num_classes,
            config.head_options(),
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            stage,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.stage.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.stage.num_classes
    }

    fn check_input(&self, batch: &ModalityBatch) -> Result<()> {
        let d = batch.features(Modality::Acoustic).ncols();
        if d != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "model_input",
                lhs: [batch.len(), d],
                rhs: [batch.len(), self.input_dim()],
            });
        }
        Ok(())
    }

    /// Per-modality embeddings.
    pub fn embed(&self, batch: &ModalityBatch) -> Result<[Tensor; 3]> {
        self.check_input(batch)?;
        let mut tape = Tape::new(&self.store);
        let e = self.stage.encode_batch(&mut tape, batch)?;
        Ok(e.map(|v| tape.value(v).clone()))
    }

    /// Class probabilities from the fusion head.
    pub fn predict(&self, batch: &ModalityBatch) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut tape = Tape::new(&self.store);
        let e = self.stage.encode_batch(&mut tape, batch)?;
        let m = self.head.fuse(&mut tape, e)?;
        Ok(tape.value(m).clone())
    }

    /// All vertex weights, similarities and information vectors of the graph
    /// fusion network.
    pub fn graph(&self, batch: &ModalityBatch) -> Result<GfnGraph> {
        self.check_input(batch)?;
        let FusionHead::Gfn(gfn) = &self.head else {
            return Err(Error::NotGfn);
        };
        let mut tape = Tape::new(&self.store);
        let e = self.stage.encode_batch(&mut tape, batch)?;
        let nodes = gfn.forward(&mut tape, e)?;
        Ok(gfn.graph(&tape, &nodes))
    }

    /// `|mean D(source embeddings) − mean D(target embeddings)|`, with both
    /// source modalities pooled.
    pub fn discriminator_gap(&self, batch: &ModalityBatch) -> Result<f64> {
        self.check_input(batch)?;
        let mut tape = Tape::new(&self.store);
        let e = self.stage.encode_batch(&mut tape, batch)?;
        let mut mean_score = |m: Modality| -> Result<f64> {
            let d = self.stage.discriminate(&mut tape, e[m.index()])?;
            Ok(tape.value(d).mean().unwrap_or(0.0))
        };
        let [s0, s1] = self.stage.sources();
        let source = 0.5 * (mean_score(s0)? + mean_score(s1)?);
        let target = mean_score(self.stage.target)?;
        Ok((source - target).abs())
    }

    /// Runs `f` over the split in chunks of [`EVAL_CHUNK`] rows and stacks
    /// the results.
    fn over_split<F>(&self, bundle: &FeatureBundle, idx: &[usize], f: F) -> Result<Tensor>
    where
        F: Fn(&ModalityBatch) -> Result<Tensor>,
    {
        let mut parts = Vec::new();
        for chunk in idx.chunks(EVAL_CHUNK) {
            parts.push(f(&bundle.batch_from_indices(chunk))?);
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros((0, 0)));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("chunks share a width"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(model)
    }
}

/// One training epoch: mean losses over its batches and the validation
/// accuracy measured after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub task_mse: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub samples: usize,
    pub accuracy: f64,
    pub f1_per_class: Vec<f64>,
    pub avg_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub wall_clock_secs: Option<f64>,
    pub config: RunConfig,
    pub seed: u64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Accuracy, per-class and weighted F1 and the confusion matrix of `model`
/// on one split.
pub fn evaluate(model: &ArgfModel, bundle: &FeatureBundle, split: Split) -> Result<MetricsReport> {
    let idx = bundle.indices(split);
    let predictions = if idx.is_empty() {
        Vec::new()
    } else {
        metrics::argmax_rows(&model.over_split(bundle, &idx, |b| model.predict(b))?)
    };
    let labels: Vec<usize> = idx.iter().map(|&i| bundle.labels[i]).collect();
    let confusion = Confusion::from_predictions(&labels, &predictions, model.num_classes())?;
    Ok(MetricsReport {
        split,
        samples: idx.len(),
        accuracy: confusion.accuracy(),
        f1_per_class: confusion.f1_per_class(),
        avg_f1: confusion.weighted_f1(),
        confusion: confusion.counts,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_accuracy: None,
        wall_clock_secs: None,
        config: model.config.clone(),
        seed: model.config.seed,
    })
}

/// [`ArgfModel::discriminator_gap`] over a whole split.
pub fn adversarial_gap(model: &ArgfModel, bundle: &FeatureBundle, split: Split) -> Result<f64> {
    model.discriminator_gap(&bundle.split_batch(split))
}
