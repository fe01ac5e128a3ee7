use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{concatenate, Axis};

use crate::data::{FeatureBundle, Split};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::ArgfModel;

fn write_rows(path: &Path, rows: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::bundle(path, e.to_string()))?);
    for (i, row) in rows.rows().into_iter().enumerate() {
        let mut line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        if let Some(labels) = labels {
            line.push(',');
            line.push_str(&labels[i].to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one CSV row per sample: the concatenated embeddings `a ⊕ v ⊕ l`
/// (`3k` values) followed by the label. No header.
pub fn export_embeddings(model: &ArgfModel, bundle: &FeatureBundle, path: &Path) -> Result<()> {
    let idx: Vec<usize> = (0..bundle.count()).collect();
    let rows = model.over_split(bundle, &idx, |b| {
        let e = model.embed(b)?;
        Ok(concatenate(Axis(1), &[e[0].view(), e[1].view(), e[2].view()]).expect("equal rows"))
    })?;
    write_rows(path, &rows, Some(&bundle.labels))
}

/// Writes the twelve vertex weights of every sample in `split`, in the
/// fixed order a, v, l, al, av, vl, al·av, al·vl, av·vl, al+v, av+l, vl+a.
/// No header. Returns the number of rows written.
pub fn export_graph_weights(model: &ArgfModel, bundle: &FeatureBundle, split: Split, path: &Path) -> Result<usize> {
    let idx = bundle.indices(split);
    let rows = model.over_split(bundle, &idx, |b| Ok(model.graph(b)?.vertex_weights()))?;
    write_rows(path, &rows, None)?;
    Ok(idx.len())
}
