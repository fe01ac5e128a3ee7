use std::time::Instant;

use crate::data::{batches, FeatureBundle, ModalityBatch, Split};
use crate::error::{Error, Result};
use crate::model::{losses, LossBreakdown, StageOptimizers};
use crate::numcore::{AdamState, ParamStore, Tape};

use super::{evaluate, ArgfModel, EpochRecord, MetricsReport, RunConfig};

/// Result of [`Trainer::fit`]: the model with its best-validation parameters
/// restored, and the per-epoch history.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: ArgfModel,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
}

/// Owns a model and its optimizer states for one training run.
///
/// Each batch runs the three embedding-stage phases, then one task update
/// minimizing the MSE between the fusion head's decision and the one-hot
/// label. The task update moves the head and, unless disabled, the encoders.
pub struct Trainer {
    model: ArgfModel,
    stage_opt: StageOptimizers,
    task_opt: AdamState,
    history: Vec<EpochRecord>,
    best: Option<(usize, Option<f64>, ParamStore)>,
    since_best: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, bundle: &FeatureBundle) -> Result<Self> {
        bundle.validate()?;
        let model = ArgfModel::new(config, bundle.dim(), bundle.num_classes)?;
        Ok(Self::from_model(model))
    }

    pub fn from_model(model: ArgfModel) -> Self {
        let cfg = &model.config;
        let stage_opt = StageOptimizers::new(&model.stage, &model.store, cfg.lr_embedding);
        let mut task_params = model.head.params();
        if cfg.update_encoders_in_task {
            task_params.extend(model.stage.encoder_params());
        }
        let task_opt = AdamState::new(cfg.lr_gfn, task_params, &model.store);
        Self {
            model,
            stage_opt,
            task_opt,
            history: Vec::new(),
            best: None,
            since_best: 0,
        }
    }

    pub fn model(&self) -> &ArgfModel {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// One MSE update through the fusion head; returns the loss before it.
    pub fn task_step(&mut self, batch: &ModalityBatch) -> Result<f64> {
        let model = &mut self.model;
        let (mse, grads) = {
            let mut tape = Tape::new(&model.store);
            let mut e = model.stage.encode_batch(&mut tape, batch)?;
            if !model.config.update_encoders_in_task {
                e = e.map(|v| tape.detach(v));
            }
            let m = model.head.fuse(&mut tape, e)?;
            let y = tape.constant(batch.onehot.clone());
            let loss = losses::mse(&mut tape, m, y)?;
            let mse = tape.scalar_value(loss);
            if !mse.is_finite() {
                return Err(Error::Divergence(format!("non-finite task loss {mse}")));
            }
            (mse, tape.backward(loss)?)
        };
        self.task_opt.step(&mut model.store, grads)?;
        Ok(mse)
    }

    /// All four updates on one batch.
    pub fn batch_step(&mut self, batch: &ModalityBatch) -> Result<(LossBreakdown, f64)> {
        let cfg = &self.model.config;
        let (lambda, ablations) = (cfg.lambda, cfg.ablations);
        let losses = self.model.stage.train_step(
            &mut self.model.store,
            &mut self.stage_opt,
            batch,
            lambda,
            ablations,
        )?;
        let mse = self.task_step(batch)?;
        Ok((losses, mse))
    }

    /// Trains one epoch over shuffled training batches and records the
    /// validation accuracy.
    pub fn run_epoch(&mut self, bundle: &FeatureBundle) -> Result<EpochRecord> {
        let epoch = self.history.len() + 1;
        let cfg = &self.model.config;
        let shuffle_seed = cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut sum = LossSums::default();
        for batch in batches(bundle, Split::Train, cfg.batch_size, shuffle_seed) {
            let (l, mse) = self.batch_step(&batch)?;
            sum.add(l, mse);
        }
        let val_accuracy = if bundle.indices(Split::Val).is_empty() {
            None
        } else {
            Some(evaluate(&self.model, bundle, Split::Val)?.accuracy)
        };
        let record = EpochRecord {
            epoch,
            losses: sum.mean(self.model.config.lambda),
            task_mse: sum.mse / sum.n.max(1) as f64,
            val_accuracy,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `epochs` or early stopping, then restores the
    /// best-validation parameters. A tie with the best accuracy so far counts
    /// as an improvement, so the latest of equally accurate checkpoints is
    /// kept. Without a validation split the latest parameters count as best. On error the best parameters seen so far
    /// (or the ones from before the failing epoch) are restored and the
    /// error is returned; [`Trainer::model`] then holds the retained model.
    pub fn fit(&mut self, bundle: &FeatureBundle) -> Result<()> {
        let (epochs, patience) = (self.model.config.epochs, self.model.config.patience);
        while self.history.len() < epochs {
            let last_good = self.model.store.clone();
            let record = match self.run_epoch(bundle) {
                Ok(r) => r,
                Err(e) => {
                    self.model.store = match &self.best {
                        Some((_, _, store)) => store.clone(),
                        None => last_good,
                    };
                    return Err(e);
                }
            };
            let improved = match (&self.best, record.val_accuracy) {
                (None, _) | (_, None) => true,
                (Some((_, Some(best), _)), Some(acc)) => acc >= *best,
                (Some((_, None, _)), Some(_)) => true,
            };
            if improved {
                self.best = Some((record.epoch, record.val_accuracy, self.model.store.clone()));
                self.since_best = 0;
            } else {
                self.since_best += 1;
                if patience > 0 && self.since_best >= patience {
                    break;
                }
            }
        }
        if let Some((_, _, store)) = &self.best {
            self.model.store = store.clone();
        }
        Ok(())
    }

    pub fn finish(self) -> FitOutcome {
        let (best_epoch, best_val_accuracy) = match &self.best {
            Some((e, acc, _)) => (Some(*e), *acc),
            None => (None, None),
        };
        FitOutcome {
            model: self.model,
            epochs: self.history,
            best_epoch,
            best_val_accuracy,
        }
    }
}

#[derive(Default)]
struct LossSums {
    fal: Option<f64>,
    tal: Option<f64>,
    rl: Option<f64>,
    cl: Option<f64>,
    mse: f64,
    n: usize,
}

impl LossSums {
    fn add(&mut self, l: LossBreakdown, mse: f64) {
        let acc = |s: &mut Option<f64>, v: Option<f64>| {
            if let Some(v) = v {
                *s = Some(s.unwrap_or(0.0) + v);
            }
        };
        acc(&mut self.fal, l.fal);
        acc(&mut self.tal, l.tal);
        acc(&mut self.rl, l.rl);
        acc(&mut self.cl, l.cl);
        self.mse += mse;
        self.n += 1;
    }

    fn mean(&self, lambda: f64) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        let m = |s: Option<f64>| s.map(|v| v / n);
        LossBreakdown {
            fal: m(self.fal),
            tal: m(self.tal),
            rl: m(self.rl),
            cl: m(self.cl),
            total: 0.0,
        }
        .finish(lambda)
    }
}

/// Trains with `config`, restores the best-validation checkpoint and reports
/// test-split metrics together with the training history.
pub fn train(config: RunConfig, bundle: &FeatureBundle) -> Result<(ArgfModel, MetricsReport)> {
    let start = Instant::now();
    let deterministic = config.deterministic;
    let mut trainer = Trainer::new(config, bundle)?;
    trainer.fit(bundle)?;
    let outcome = trainer.finish();
    let mut report = evaluate(&outcome.model, bundle, Split::Test)?;
    report.epochs = outcome.epochs;
    report.best_epoch = outcome.best_epoch;
    report.best_val_accuracy = outcome.best_val_accuracy;
    if !deterministic {
        report.wall_clock_secs = Some(start.elapsed().as_secs_f64());
    }
    Ok((outcome.model, report))
}
