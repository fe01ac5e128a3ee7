use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use argf_core::data::{generate_synthetic, load_bundle_with_seed, save_bundle, Split, SyntheticSpec};
use argf_core::gradcheck;
use argf_core::harness::{
    ablate, compare, evaluate, export_embeddings, export_graph_weights, format_table, grid_search, ConfigGrid,
    MetricsReport, Trainer,
};
use argf_core::{ArgfModel, FeatureBundle, FusionKind, Modality, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "argf", version, about = "Adversarial embedding + graph fusion for three-modality classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and report test metrics.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write the trained model (JSON).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Where to write the metrics report (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every point of a grid and rank by validation accuracy.
    Gridsearch {
        /// JSON grid: {"k": [...], "lambda": [...], "lr_embedding": [...],
        /// "lr_gfn": [...], "batch_size": [...]}. The base config comes from
        /// --config and the override flags.
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full model plus the no_adv, no_classifier and no_decoder ablations.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every fusion strategy on the same embedding stage.
    Compare {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic feature bundle.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// JSON file with SyntheticSpec fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "num_classes")]
        num_classes: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        redundancy: Option<f64>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the concatenated embeddings and label of every sample as CSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the twelve graph vertex weights of every sample in a split as CSV.
    ExportGraph {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Feature bundle directory.
    #[arg(long)]
    data: PathBuf,
    /// Seed of the 70/10/20 split used when the bundle has no splits.csv.
    #[arg(long = "split_seed", default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<FeatureBundle> {
        load_bundle_with_seed(&self.data, self.split_seed)
            .with_context(|| format!("loading bundle {}", self.data.display()))
    }
}

/// A JSON config file plus one flag per config key; flags win.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "lr_embedding")]
    lr_embedding: Option<f64>,
    #[arg(long = "lr_gfn")]
    lr_gfn: Option<f64>,
    #[arg(long = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long = "target_modality")]
    target_modality: Option<Modality>,
    #[arg(long)]
    fusion: Option<FusionKind>,
    #[arg(long = "no_adv", num_args = 0..=1, default_missing_value = "true")]
    no_adv: Option<bool>,
    #[arg(long = "no_decoder", num_args = 0..=1, default_missing_value = "true")]
    no_decoder: Option<bool>,
    #[arg(long = "no_classifier", num_args = 0..=1, default_missing_value = "true")]
    no_classifier: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "similarity_offset")]
    similarity_offset: Option<f64>,
    #[arg(long = "lmf_rank")]
    lmf_rank: Option<usize>,
    #[arg(long = "update_encoders_in_task", num_args = 0..=1, default_missing_value = "true")]
    update_encoders_in_task: Option<bool>,
    #[arg(long = "shared_vertex_params", num_args = 0..=1, default_missing_value = "true")]
    shared_vertex_params: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident).+ <- $flag:ident) => {
                if let Some(v) = self.$flag {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(k <- k);
        set!(lambda <- lambda);
        set!(lr_embedding <- lr_embedding);
        set!(lr_gfn <- lr_gfn);
        set!(batch_size <- batch_size);
        set!(epochs <- epochs);
        set!(patience <- patience);
        set!(target_modality <- target_modality);
        set!(fusion <- fusion);
        set!(ablations.no_adv <- no_adv);
        set!(ablations.no_decoder <- no_decoder);
        set!(ablations.no_classifier <- no_classifier);
        set!(seed <- seed);
        set!(similarity_offset <- similarity_offset);
        set!(lmf_rank <- lmf_rank);
        set!(update_encoders_in_task <- update_encoders_in_task);
        set!(shared_vertex_params <- shared_vertex_params);
        set!(deterministic <- deterministic);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn print_summary(name: &str, r: &MetricsReport) {
    println!(
        "{name}: split={} samples={} accuracy={:.4} avg_f1={:.4} epochs={} best_epoch={}",
        r.split,
        r.samples,
        r.accuracy,
        r.avg_f1,
        r.epochs.len(),
        r.best_epoch.map_or("-".into(), |e| e.to_string())
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            config,
            model,
            out,
        } => {
            let cfg = config.resolve()?;
            let bundle = data.load()?;
            let start = std::time::Instant::now();
            let mut trainer = Trainer::new(cfg.clone(), &bundle)?;
            let fitted = trainer.fit(&bundle);
            if let Err(e) = fitted {
                if let Some(path) = &model {
                    trainer.model().save(path)?;
                    eprintln!("last good checkpoint written to {}", path.display());
                }
                bail!("training failed: {e}");
            }
            let outcome = trainer.finish();
            let mut report = evaluate(&outcome.model, &bundle, Split::Test)?;
            report.epochs = outcome.epochs;
            report.best_epoch = outcome.best_epoch;
            report.best_val_accuracy = outcome.best_val_accuracy;
            if !cfg.deterministic {
                report.wall_clock_secs = Some(start.elapsed().as_secs_f64());
            }
            if let Some(path) = &model {
                outcome.model.save(path)?;
            }
            if out.is_some() {
                print_summary("train", &report);
            }
            write_json(out.as_deref(), &report)?;
        }
        Command::Eval {
            model,
            data,
            split,
            out,
        } => {
            let model = ArgfModel::load(&model).with_context(|| format!("loading model {}", model.display()))?;
            let bundle = data.load()?;
            let report = evaluate(&model, &bundle, split)?;
            if out.is_some() {
                print_summary("eval", &report);
            }
            write_json(out.as_deref(), &report)?;
        }
        Command::Gridsearch {
            grid,
            data,
            config,
            out,
        } => {
            let base = config.resolve()?;
            let text = fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let mut grid: ConfigGrid = serde_json::from_str(&text).with_context(|| format!("parsing {}", grid.display()))?;
            grid.base = base;
            let bundle = data.load()?;
            let entries = grid_search(&grid, &bundle)?;
            for e in &entries {
                let c = &e.validation.config;
                println!(
                    "#{:<3} val_acc={:.4} k={} lambda={} lr_embedding={} lr_gfn={} batch_size={}",
                    e.rank, e.validation.accuracy, c.k, c.lambda, c.lr_embedding, c.lr_gfn, c.batch_size
                );
            }
            if let Some(test) = entries.first().and_then(|e| e.test.as_ref()) {
                print_summary("top config", test);
            }
            if let Some(path) = &out {
                write_json(Some(path), &entries)?;
            }
        }
        Command::Ablate { data, config, out } => {
            let cfg = config.resolve()?;
            let bundle = data.load()?;
            let rows = ablate(&cfg, &bundle)?;
            print!("{}", format_table(&rows));
            if let Some(path) = &out {
                write_json(Some(path), &rows)?;
            }
        }
        Command::Compare { data, config, out } => {
            let cfg = config.resolve()?;
            let bundle = data.load()?;
            let rows = compare(&cfg, &bundle)?;
            print!("{}", format_table(&rows));
            if let Some(path) = &out {
                write_json(Some(path), &rows)?;
            }
        }
        Command::Gradcheck { seed, out } => {
            let results = gradcheck::run_all(seed)?;
            for r in &results {
                println!(
                    "{:<28} {:>6} entries  max rel err {:.3e}  {}",
                    r.name,
                    r.entries,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            if let Some(path) = &out {
                write_json(Some(path), &results)?;
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
        Command::Synth {
            out,
            spec,
            num_classes,
            dim,
            separation,
            redundancy,
            count,
            seed,
        } => {
            let mut s = match &spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => SyntheticSpec::default(),
            };
            s.num_classes = num_classes.unwrap_or(s.num_classes);
            s.dim = dim.unwrap_or(s.dim);
            s.separation = separation.unwrap_or(s.separation);
            s.redundancy = redundancy.unwrap_or(s.redundancy);
            s.count = count.unwrap_or(s.count);
            s.seed = seed.unwrap_or(s.seed);
            let bundle = generate_synthetic(&s)?;
            save_bundle(&bundle, &out)?;
            println!(
                "wrote {} samples ({} classes, dim {}) to {}",
                bundle.count(),
                bundle.num_classes,
                bundle.dim(),
                out.display()
            );
        }
        Command::ExportEmbeddings { model, data, out } => {
            let model = ArgfModel::load(&model).with_context(|| format!("loading model {}", model.display()))?;
            let bundle = data.load()?;
            export_embeddings(&model, &bundle, &out)?;
            println!("wrote {} rows to {}", bundle.count(), out.display());
        }
        Command::ExportGraph {
            model,
            data,
            split,
            out,
        } => {
            let model = ArgfModel::load(&model).with_context(|| format!("loading model {}", model.display()))?;
            let bundle = data.load()?;
            let rows = export_graph_weights(&model, &bundle, split, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
