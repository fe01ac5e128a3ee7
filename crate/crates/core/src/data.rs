//! Feature bundles: synthetic generation, on-disk format and batching.
//!
//! A bundle directory holds
//!
//! ```text
//! manifest.json   {"modalities":[{"name":"a","dim":16},...],"num_classes":2,"count":2000}
//! a.csv v.csv l.csv   count rows of dim comma-separated floats, no header
//! labels.csv      count rows, one class id each
//! splits.csv      optional, rows "index,train|val|test"
//! ```
//!
//! Without `splits.csv` a seeded 70/10/20 split is drawn.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// A minibatch: one feature matrix per modality plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBatch {
    features: [Tensor; 3],
    pub labels: Vec<usize>,
    pub onehot: Tensor,
    /// Bundle row of each batch row.
    pub indices: Vec<usize>,
}

impl ModalityBatch {
    pub fn new(features: [Tensor; 3], labels: Vec<usize>, num_classes: usize) -> Self {
        assert!(features.iter().all(|f| f.nrows() == labels.len()));
        let mut onehot = Array2::zeros((labels.len(), num_classes));
        for (r, &c) in labels.iter().enumerate() {
            onehot[[r, c]] = 1.0;
        }
        let indices = (0..labels.len()).collect();
        Self {
            features,
            labels,
            onehot,
            indices,
        }
    }

    pub fn features(&self, m: Modality) -> &Tensor {
        &self.features[m.index()]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    /// Per-modality `count × d` matrices in `a, v, l` order.
    pub features: [Tensor; 3],
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Vec<Split>,
}

impl FeatureBundle {
    /// Builds a bundle and checks every invariant.
    pub fn new(features: [Tensor; 3], labels: Vec<usize>, num_classes: usize, splits: Vec<Split>) -> Result<Self> {
        let b = Self {
            features,
            labels,
            num_classes,
            splits,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        let n = self.labels.len();
        if n == 0 {
            return invalid("bundle has no samples".into());
        }
        let d = self.features[0].ncols();
        for m in Modality::ALL {
            let f = &self.features[m.index()];
            if f.nrows() != n {
                return invalid(format!("modality {m} has {} rows, labels have {n}", f.nrows()));
            }
            if f.ncols() != d {
                return invalid(format!("modality {m} has dim {}, modality a has {d}", f.ncols()));
            }
        }
        if let Some(bad) = self.labels.iter().find(|&&c| c >= self.num_classes) {
            return invalid(format!("label {bad} out of range for {} classes", self.num_classes));
        }
        if self.splits.len() != n {
            return invalid(format!("{} split entries for {n} samples", self.splits.len()));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].ncols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.count()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn batch_from_indices(&self, idx: &[usize]) -> ModalityBatch {
        let features = Modality::ALL.map(|m| self.features[m.index()].select(ndarray::Axis(0), idx));
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let mut batch = ModalityBatch::new(features, labels, self.num_classes);
        batch.indices = idx.to_vec();
        batch
    }

    /// The whole split as one batch, in index order.
    pub fn split_batch(&self, split: Split) -> ModalityBatch {
        self.batch_from_indices(&self.indices(split))
    }

    pub fn all(&self) -> ModalityBatch {
        let idx: Vec<usize> = (0..self.count()).collect();
        self.batch_from_indices(&idx)
    }
}

/// Seeded shuffle of one split into minibatches; the last partial batch is
/// kept.
pub fn batches(bundle: &FeatureBundle, split: Split, batch_size: usize, seed: u64) -> Vec<ModalityBatch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut idx = bundle.indices(split);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size)
        .map(|c| bundle.batch_from_indices(c))
        .collect()
}

/// Seeded 70/10/20 train/val/test assignment.
pub fn default_splits(count: usize, seed: u64) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (count as f64 * 0.7).round() as usize;
    let n_val = (count as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Test; count];
    for (pos, &i) in idx.iter().enumerate() {
        if pos < n_train {
            splits[i] = Split::Train;
        } else if pos < n_train + n_val {
            splits[i] = Split::Val;
        }
    }
    splits
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Parameters of the synthetic three-modality generator.
///
/// Each class `c` owns a shared latent `z_c` and a private latent `u_{c,m}`
/// per modality; modality `m` of a class-`c` sample is
/// `ρ·A_m z_c + (1−ρ)·B_m u_{c,m} + σ_m·ε` with fixed seeded projections
/// `A_m`, `B_m`. Latents are drawn with per-entry scale `δ/√d`, so class
/// prototypes sit roughly `δ` apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    /// Noise scale per modality, `a, v, l` order.
    pub noise: [f64; 3],
    pub redundancy: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            dim: 16,
            separation: 3.0,
            noise: [0.5, 0.6, 0.7],
            redundancy: 0.5,
            count: 2000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.count == 0 {
            return bad("count must be positive");
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return bad("separation must be positive");
        }
        if self.noise.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("noise scales must be positive");
        }
        if !(0.0..=1.0).contains(&self.redundancy) {
            return bad("redundancy must lie in [0, 1]");
        }
        Ok(())
    }

    /// Construction means, indexed `[class][modality]`.
    pub fn class_means(&self) -> Result<Vec<[Array1<f64>; 3]>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(self.prototypes(&mut rng))
    }

    fn prototypes(&self, rng: &mut ChaCha8Rng) -> Vec<[Array1<f64>; 3]> {
        let d = self.dim;
        let proj_scale = 1.0 / (d as f64).sqrt();
        let latent_scale = self.separation / (d as f64).sqrt();
        let mut gauss = |n: usize, m: usize, scale: f64| {
            Array2::from_shape_fn((n, m), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let shared = gauss(self.num_classes, d, latent_scale);
        let private: Vec<Array2<f64>> = (0..3).map(|_| gauss(self.num_classes, d, latent_scale)).collect();
        let a: Vec<Array2<f64>> = (0..3).map(|_| gauss(d, d, proj_scale)).collect();
        let b: Vec<Array2<f64>> = (0..3).map(|_| gauss(d, d, proj_scale)).collect();
        let rho = self.redundancy;
        (0..self.num_classes)
            .map(|c| {
                [0, 1, 2].map(|m| {
                    rho * a[m].dot(&shared.row(c)) + (1.0 - rho) * b[m].dot(&private[m].row(c))
                })
            })
            .collect()
    }
}

/// Draws a bundle from `spec`; identical specs give bitwise-identical bundles.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = spec.prototypes(&mut rng);
    let n = spec.count;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = [0, 1, 2].map(|_| Array2::zeros((n, spec.dim)));
    for (i, &c) in labels.iter().enumerate() {
        for m in 0..3 {
            let mut row = features[m].row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                let eps: f64 = rng.sample(StandardNormal);
                *x = means[c][m][j] + spec.noise[m] * eps;
            }
        }
    }
    let splits = default_splits(n, spec.seed.wrapping_add(1));
    FeatureBundle::new(features, labels, spec.num_classes, splits)
}

// ---------------------------------------------------------------------------
// On-disk format

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub modalities: Vec<ModalityEntry>,
    pub num_classes: usize,
    pub count: usize,
}

pub fn save_bundle(bundle: &FeatureBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let d = bundle.dim();
    let manifest = Manifest {
        modalities: Modality::ALL
            .iter()
            .map(|m| ModalityEntry {
                name: m.tag().to_string(),
                dim: d,
            })
            .collect(),
        num_classes: bundle.num_classes,
        count: bundle.count(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for m in Modality::ALL {
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join(format!("{}.csv", m.tag())))?);
        for row in bundle.features[m.index()].rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
    }
    let labels: String = bundle.labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("labels.csv"), labels)?;
    let splits: String = bundle
        .splits
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i},{s}\n"))
        .collect();
    fs::write(dir.join("splits.csv"), splits)?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Err(Error::bundle(path, "file is missing"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    reader
        .records()
        .map(|r| r.map_err(|e| Error::bundle(path, e.to_string())))
        .collect()
}

fn check_count(path: &Path, rows: usize, expected: usize) -> Result<()> {
    if rows != expected {
        return Err(Error::bundle(
            path,
            format!("expected {expected} rows (manifest count), found {rows}"),
        ));
    }
    Ok(())
}

/// Loads and validates a bundle directory; absent splits are drawn with seed 0.
pub fn load_bundle(dir: &Path) -> Result<FeatureBundle> {
    load_bundle_with_seed(dir, 0)
}

pub fn load_bundle_with_seed(dir: &Path, split_seed: u64) -> Result<FeatureBundle> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::bundle(&manifest_path, format!("cannot read: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::bundle(&manifest_path, format!("malformed manifest: {e}")))?;
    if manifest.modalities.len() != 3 {
        return Err(Error::bundle(
            &manifest_path,
            format!("expected 3 modalities, found {}", manifest.modalities.len()),
        ));
    }
    if manifest.count == 0 {
        return Err(Error::bundle(&manifest_path, "count must be positive"));
    }
    if manifest.num_classes == 0 {
        return Err(Error::bundle(&manifest_path, "num_classes must be positive"));
    }
    let dim = manifest.modalities[0].dim;
    if dim == 0 {
        return Err(Error::bundle(&manifest_path, "modality dims must be positive"));
    }
    let mut features: [Option<Tensor>; 3] = [None, None, None];
    for entry in &manifest.modalities {
        let m: Modality = entry
            .name
            .parse()
            .map_err(|e: Error| Error::bundle(&manifest_path, e.to_string()))?;
        if entry.dim != dim {
            return Err(Error::bundle(
                &manifest_path,
                format!(
                    "dimension mismatch across modalities: {} has {}, {} has {dim}",
                    entry.name, entry.dim, manifest.modalities[0].name
                ),
            ));
        }
        if features[m.index()].is_some() {
            return Err(Error::bundle(&manifest_path, format!("modality {m} listed twice")));
        }
        let path = dir.join(format!("{}.csv", entry.name));
        let rows = read_rows(&path)?;
        check_count(&path, rows.len(), manifest.count)?;
        let mut mat = Array2::zeros((manifest.count, dim));
        for (i, rec) in rows.iter().enumerate() {
            if rec.len() != dim {
                return Err(Error::bundle(
                    &path,
                    format!("ragged row {}: expected {dim} fields, found {}", i + 1, rec.len()),
                ));
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::bundle(&path, format!("row {} field {}: `{field}` is not a number", i + 1, j + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::bundle(&path, format!("row {} field {}: non-finite value", i + 1, j + 1)));
                }
                mat[[i, j]] = v;
            }
        }
        features[m.index()] = Some(mat);
    }

    let labels_path = dir.join("labels.csv");
    let rows = read_rows(&labels_path)?;
    check_count(&labels_path, rows.len(), manifest.count)?;
    let mut labels = Vec::with_capacity(manifest.count);
    for (i, rec) in rows.iter().enumerate() {
        if rec.len() != 1 {
            return Err(Error::bundle(
                &labels_path,
                format!("row {}: expected one label, found {} fields", i + 1, rec.len()),
            ));
        }
        let c: usize = rec[0]
            .parse()
            .map_err(|_| Error::bundle(&labels_path, format!("row {}: `{}` is not a class id", i + 1, &rec[0])))?;
        if c >= manifest.num_classes {
            return Err(Error::bundle(
                &labels_path,
                format!("row {}: label {c} out of range for num_classes {}", i + 1, manifest.num_classes),
            ));
        }
        labels.push(c);
    }

    let splits_path = dir.join("splits.csv");
    let splits = if splits_path.exists() {
        let rows = read_rows(&splits_path)?;
        check_count(&splits_path, rows.len(), manifest.count)?;
        let mut splits: Vec<Option<Split>> = vec![None; manifest.count];
        for (i, rec) in rows.iter().enumerate() {
            if rec.len() != 2 {
                return Err(Error::bundle(
                    &splits_path,
                    format!("row {}: expected `index,split`, found {} fields", i + 1, rec.len()),
                ));
            }
            let idx: usize = rec[0]
                .parse()
                .map_err(|_| Error::bundle(&splits_path, format!("row {}: bad index `{}`", i + 1, &rec[0])))?;
            if idx >= manifest.count {
                return Err(Error::bundle(&splits_path, format!("row {}: index {idx} out of range", i + 1)));
            }
            let s: Split = rec[1]
                .parse()
                .map_err(|e: String| Error::bundle(&splits_path, format!("row {}: {e}", i + 1)))?;
            if splits[idx].replace(s).is_some() {
                return Err(Error::bundle(&splits_path, format!("row {}: index {idx} assigned twice", i + 1)));
            }
        }
        // count rows with no duplicates cover every index
        splits.into_iter().map(Option::unwrap).collect()
    } else {
        default_splits(manifest.count, split_seed)
    };

    let [a, v, l] = features;
    let bundle = FeatureBundle {
        features: [a.unwrap(), v.unwrap(), l.unwrap()],
        labels,
        num_classes: manifest.num_classes,
        splits,
    };
    bundle.validate()?;
    Ok(bundle)
}
