//! Hierarchical graph fusion over the three encoded modalities.
//!
//! Layer 1 scores each unimodal vertex with a shared sigmoid attention unit
//! and averages them into `U`. Layer 2 fuses every pair of unimodal vertices
//! with an MLP; a bimodal vertex's weight grows with its parents' weights and
//! shrinks with their similarity, and the layer's weights are softmax
//! normalized before averaging into `B`. Layer 3 repeats the construction for
//! six trimodal vertices (three bimodal pairs plus three bimodal vertices
//! joined with their missing modality) to give `T`. A decision head reads the
//! concatenation `U ⊕ B ⊕ T`.
//!
//! Per-sample scalars (weights, similarities) are `[batch, 1]` columns.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Modality;
use crate::numcore::{Activation, DenseLayer, ParamId, ParamStore, Sequential, Tape, Tensor, Var};

/// Variance floor of the decision head's per-sample standardization.
pub const STANDARDIZE_EPS: f64 = 1e-6;

pub const DEFAULT_SIMILARITY_OFFSET: f64 = 0.5;

/// Layer-2 vertices in export order: `al, av, vl`.
pub const BIMODAL_PAIRS: [(Modality, Modality); 3] = [
    (Modality::Acoustic, Modality::Language),
    (Modality::Acoustic, Modality::Visual),
    (Modality::Visual, Modality::Language),
];

/// A parent of a trimodal vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parent {
    Unimodal(Modality),
    /// Index into [`BIMODAL_PAIRS`].
    Bimodal(usize),
}

/// Layer-3 vertices in export order: `al·av, al·vl, av·vl, al+v, av+l, vl+a`.
pub const TRIMODAL_PARENTS: [(Parent, Parent); 6] = [
    (Parent::Bimodal(0), Parent::Bimodal(1)),
    (Parent::Bimodal(0), Parent::Bimodal(2)),
    (Parent::Bimodal(1), Parent::Bimodal(2)),
    (Parent::Bimodal(0), Parent::Unimodal(Modality::Visual)),
    (Parent::Bimodal(1), Parent::Unimodal(Modality::Language)),
    (Parent::Bimodal(2), Parent::Unimodal(Modality::Acoustic)),
];

/// Column names of [`GfnGraph::vertex_weights`].
pub const VERTEX_NAMES: [&str; 12] = [
    "a", "v", "l", "al", "av", "vl", "al*av", "al*vl", "av*vl", "al+v", "av+l", "vl+a",
];

/// Standardizes every row to zero mean and unit variance.
pub fn standardize_rows(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let mu = tape.mean_cols(x);
    let centered = tape.sub(x, mu)?;
    let sq = tape.square(centered);
    let var = tape.mean_cols(sq);
    let var = tape.add_scalar(var, STANDARDIZE_EPS);
    let sd = tape.sqrt(var);
    tape.div(centered, sd)
}

/// Normalization layer followed by dense(tanh) → dense(tanh) → dense(softmax).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionHead {
    pub layers: Sequential,
}

impl DecisionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = Sequential::new(
            store,
            name,
            in_dim,
            &[
                (hidden, Activation::Tanh),
                (hidden, Activation::Tanh),
                (num_classes, Activation::Softmax),
            ],
            rng,
        );
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let z = standardize_rows(tape, x)?;
        self.layers.forward(tape, z)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.params()
    }

    pub fn in_dim(&self) -> usize {
        self.layers.in_dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfnParams {
    /// Modality attention: `k → 1`, sigmoid.
    pub man: DenseLayer,
    /// Layer-2 fusion nets; one shared net, or one per vertex.
    pub bimodal: Vec<Sequential>,
    /// Layer-3 fusion nets; one shared net, or one per vertex.
    pub trimodal: Vec<Sequential>,
    pub dec: DecisionHead,
    /// Constant added to the similarity in the vertex-weight denominator.
    pub similarity_offset: f64,
    pub embed_dim: usize,
}

/// Tape handles of every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct GfnNodes {
    pub uni_info: [Var; 3],
    pub uni_alpha: [Var; 3],
    pub bi_info: [Var; 3],
    pub bi_similarity: [Var; 3],
    /// `[batch, 3]`, rows sum to one.
    pub bi_alpha: Var,
    pub tri_info: [Var; 6],
    pub tri_similarity: [Var; 6],
    /// `[batch, 6]`, rows sum to one.
    pub tri_alpha: Var,
    pub unimodal: Var,
    pub bimodal: Var,
    pub trimodal: Var,
    pub omega: Var,
    pub decision: Var,
}

/// Values of the fusion graph for a batch, for inspection and export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GfnGraph {
    /// `[batch, 3]` raw attention weights of `a, v, l`.
    pub unimodal_weights: Tensor,
    /// `[batch, 3]` normalized weights of `al, av, vl`.
    pub bimodal_weights: Tensor,
    /// `[batch, 6]` normalized trimodal weights in [`TRIMODAL_PARENTS`] order.
    pub trimodal_weights: Tensor,
    pub bimodal_similarity: Tensor,
    pub trimodal_similarity: Tensor,
    /// `[batch, 6]`: for each bimodal vertex, `α_p / (S + offset)` of its
    /// first then second parent.
    pub bimodal_edges: Tensor,
    /// `[batch, 12]`, same layout for the trimodal vertices.
    pub trimodal_edges: Tensor,
    pub unimodal_info: Vec<Tensor>,
    pub bimodal_info: Vec<Tensor>,
    pub trimodal_info: Vec<Tensor>,
    /// `[batch, N]` decision.
    pub decision: Tensor,
}

impl GfnGraph {
    /// All twelve vertex weights per sample, columns in [`VERTEX_NAMES`] order.
    pub fn vertex_weights(&self) -> Tensor {
        concatenate(
            Axis(1),
            &[
                self.unimodal_weights.view(),
                self.bimodal_weights.view(),
                self.trimodal_weights.view(),
            ],
        )
        .expect("same batch size")
    }
}

/// Inner product of the row-wise softmax of two info vectors, `[batch, 1]`.
pub fn similarity(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let pa = tape.softmax_rows(a);
    let pb = tape.softmax_rows(b);
    let prod = tape.mul(pa, pb)?;
    Ok(tape.sum_cols(prod))
}

/// Unnormalized vertex weight `(α_1 + α_2) / (S + offset)`.
pub fn raw_vertex_weight(tape: &mut Tape<'_>, alpha1: Var, alpha2: Var, sim: Var, offset: f64) -> Result<Var> {
    let num = tape.add(alpha1, alpha2)?;
    let den = tape.add_scalar(sim, offset);
    tape.div(num, den)
}

/// Softmax across a layer's vertices of their raw weights. Each entry of
/// `parents` is `(α_parent1, α_parent2, S)` as `[batch, 1]` columns; the
/// result is `[batch, parents.len()]`.
pub fn vertex_weights_layer(tape: &mut Tape<'_>, parents: &[(Var, Var, Var)], offset: f64) -> Result<Var> {
    let raw = parents
        .iter()
        .map(|&(a1, a2, s)| raw_vertex_weight(tape, a1, a2, s, offset))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat_cols(&raw)?;
    Ok(tape.softmax_rows(stacked))
}

/// `Σ_j α[:, j] · V_j`.
pub fn weighted_sum(tape: &mut Tape<'_>, alphas: Var, infos: &[Var]) -> Result<Var> {
    let terms = infos
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let a = tape.slice_cols(alphas, j, 1)?;
            tape.mul(a, *v)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

/// `U = (1/3) Σ_m α_m V_m`.
pub fn unimodal_output(tape: &mut Tape<'_>, alphas: [Var; 3], infos: [Var; 3]) -> Result<Var> {
    let terms = (0..3)
        .map(|i| tape.mul(alphas[i], infos[i]))
        .collect::<Result<Vec<_>>>()?;
    let s = tape.add_all(&terms)?;
    Ok(tape.scale(s, 1.0 / 3.0))
}

impl GfnParams {
    pub fn new(
        store: &mut ParamStore,
        embed_dim: usize,
        num_classes: usize,
        similarity_offset: f64,
        shared_vertex_params: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let k = embed_dim;
        let man = DenseLayer::new(store, "gfn.man", k, 1, Activation::Sigmoid, rng);
        let mut fusion_net = |store: &mut ParamStore, name: String| {
            Sequential::new(
                store,
                &name,
                2 * k,
                &[(k, Activation::LeakyRelu), (k, Activation::Tanh)],
                rng,
            )
        };
        let (n2, n3) = if shared_vertex_params { (1, 1) } else { (3, 6) };
        let bimodal = (0..n2).map(|i| fusion_net(store, format!("gfn.mlp2.{i}"))).collect();
        let trimodal = (0..n3).map(|i| fusion_net(store, format!("gfn.mlp3.{i}"))).collect();
        let dec = DecisionHead::new(store, "gfn.dec", 3 * k, k, num_classes, rng);
        Self {
            man,
            bimodal,
            trimodal,
            dec,
            similarity_offset,
            embed_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.man.params().to_vec();
        p.extend(self.bimodal.iter().flat_map(Sequential::params));
        p.extend(self.trimodal.iter().flat_map(Sequential::params));
        p.extend(self.dec.params());
        p
    }

    /// Attention weight of each unimodal vertex, `[batch, 1]` each.
    pub fn man_weights(&self, tape: &mut Tape<'_>, infos: [Var; 3]) -> Result<[Var; 3]> {
        let a = self.man.forward(tape, infos[0])?;
        let v = self.man.forward(tape, infos[1])?;
        let l = self.man.forward(tape, infos[2])?;
        Ok([a, v, l])
    }

    /// Info vector of bimodal vertex `index` from its parents' infos.
    pub fn bimodal_vertex(&self, tape: &mut Tape<'_>, index: usize, v1: Var, v2: Var) -> Result<Var> {
        let net = &self.bimodal[index % self.bimodal.len()];
        let cat = tape.concat_cols(&[v1, v2])?;
        net.forward(tape, cat)
    }

    pub fn trimodal_vertex(&self, tape: &mut Tape<'_>, index: usize, v1: Var, v2: Var) -> Result<Var> {
        let net = &self.trimodal[index % self.trimodal.len()];
        let cat = tape.concat_cols(&[v1, v2])?;
        net.forward(tape, cat)
    }

    pub fn decision(&self, tape: &mut Tape<'_>, u: Var, b: Var, t: Var) -> Result<(Var, Var)> {
        let omega = tape.concat_cols(&[u, b, t])?;
        let m = self.dec.forward(tape, omega)?;
        Ok((omega, m))
    }

    /// Runs all three layers and the decision head on embeddings in
    /// `a, v, l` order.
    pub fn forward(&self, tape: &mut Tape<'_>, embeddings: [Var; 3]) -> Result<GfnNodes> {
        let offset = self.similarity_offset;
        let uni_info = embeddings;
        let uni_alpha = self.man_weights(tape, uni_info)?;
        let unimodal = unimodal_output(tape, uni_alpha, uni_info)?;

        let mut bi_info = Vec::with_capacity(3);
        let mut bi_similarity = Vec::with_capacity(3);
        let mut bi_parents = Vec::with_capacity(3);
        for (i, (m1, m2)) in BIMODAL_PAIRS.iter().enumerate() {
            let (v1, v2) = (uni_info[m1.index()], uni_info[m2.index()]);
            bi_info.push(self.bimodal_vertex(tape, i, v1, v2)?);
            let s = similarity(tape, v1, v2)?;
            bi_similarity.push(s);
            bi_parents.push((uni_alpha[m1.index()], uni_alpha[m2.index()], s));
        }
        let bi_alpha = vertex_weights_layer(tape, &bi_parents, offset)?;
        let bimodal = weighted_sum(tape, bi_alpha, &bi_info)?;

        let bi_alpha_cols = (0..3)
            .map(|j| tape.slice_cols(bi_alpha, j, 1))
            .collect::<Result<Vec<_>>>()?;
        let lookup = |p: Parent| match p {
            Parent::Unimodal(m) => (uni_info[m.index()], uni_alpha[m.index()]),
            Parent::Bimodal(j) => (bi_info[j], bi_alpha_cols[j]),
        };
        let mut tri_info = Vec::with_capacity(6);
        let mut tri_similarity = Vec::with_capacity(6);
        let mut tri_parents = Vec::with_capacity(6);
        for (i, (p1, p2)) in TRIMODAL_PARENTS.iter().enumerate() {
            let ((v1, a1), (v2, a2)) = (lookup(*p1), lookup(*p2));
            tri_info.push(self.trimodal_vertex(tape, i, v1, v2)?);
            let s = similarity(tape, v1, v2)?;
            tri_similarity.push(s);
            tri_parents.push((a1, a2, s));
        }
        let tri_alpha = vertex_weights_layer(tape, &tri_parents, offset)?;
        let trimodal = weighted_sum(tape, tri_alpha, &tri_info)?;

        let (omega, decision) = self.decision(tape, unimodal, bimodal, trimodal)?;
        Ok(GfnNodes {
            uni_info,
            uni_alpha,
            bi_info: bi_info.try_into().unwrap(),
            bi_similarity: bi_similarity.try_into().unwrap(),
            bi_alpha,
            tri_info: tri_info.try_into().unwrap(),
            tri_similarity: tri_similarity.try_into().unwrap(),
            tri_alpha,
            unimodal,
            bimodal,
            trimodal,
            omega,
            decision,
        })
    }

    /// Reads the graph values of a finished forward pass off the tape.
    pub fn graph(&self, tape: &Tape<'_>, nodes: &GfnNodes) -> GfnGraph {
        let cols = |vars: &[Var]| {
            let views: Vec<_> = vars.iter().map(|v| tape.value(*v).view()).collect();
            concatenate(Axis(1), &views).expect("same batch size")
        };
        let offset = self.similarity_offset;
        let uni_alpha = cols(&nodes.uni_alpha);
        let bi_alpha = tape.value(nodes.bi_alpha).clone();
        let bi_sim = cols(&nodes.bi_similarity);
        let tri_sim = cols(&nodes.tri_similarity);
        let batch = uni_alpha.nrows();

        let mut bimodal_edges = Array2::zeros((batch, 6));
        for (j, (m1, m2)) in BIMODAL_PAIRS.iter().enumerate() {
            for r in 0..batch {
                let den = bi_sim[[r, j]] + offset;
                bimodal_edges[[r, 2 * j]] = uni_alpha[[r, m1.index()]] / den;
                bimodal_edges[[r, 2 * j + 1]] = uni_alpha[[r, m2.index()]] / den;
            }
        }
        let parent_alpha = |p: Parent, r: usize| match p {
            Parent::Unimodal(m) => uni_alpha[[r, m.index()]],
            Parent::Bimodal(j) => bi_alpha[[r, j]],
        };
        let mut trimodal_edges = Array2::zeros((batch, 12));
        for (j, (p1, p2)) in TRIMODAL_PARENTS.iter().enumerate() {
            for r in 0..batch {
                let den = tri_sim[[r, j]] + offset;
                trimodal_edges[[r, 2 * j]] = parent_alpha(*p1, r) / den;
                trimodal_edges[[r, 2 * j + 1]] = parent_alpha(*p2, r) / den;
            }
        }
        let values = |vars: &[Var]| vars.iter().map(|v| tape.value(*v).clone()).collect();
        GfnGraph {
            unimodal_weights: uni_alpha,
            bimodal_weights: bi_alpha,
            trimodal_weights: tape.value(nodes.tri_alpha).clone(),
            bimodal_similarity: bi_sim,
            trimodal_similarity: tri_sim,
            bimodal_edges,
            trimodal_edges,
            unimodal_info: values(&nodes.uni_info),
            bimodal_info: values(&nodes.bi_info),
            trimodal_info: values(&nodes.tri_info),
            decision: tape.value(nodes.decision).clone(),
        }
    }
}
