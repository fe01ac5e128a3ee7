//! Fusion heads that can replace the graph fusion network: concatenation,
//! element-wise product, softmax-weighted average, full tensor fusion and
//! its low-rank factorization. All but the low-rank head end in the same
//! decision head as the graph network.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfn::{DecisionHead, GfnParams};
use crate::numcore::{glorot_uniform, ParamId, ParamStore, Tape, Var};

/// Largest embedding size accepted by full tensor fusion.
pub const TENSOR_FUSION_MAX_K: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Gfn,
    ConcatFc,
    MultFc,
    WeightedAvg,
    Tensor,
    Lmf,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        FusionKind::ConcatFc,
        FusionKind::MultFc,
        FusionKind::WeightedAvg,
        FusionKind::Tensor,
        FusionKind::Lmf,
        FusionKind::Gfn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Gfn => "gfn",
            FusionKind::ConcatFc => "concat_fc",
            FusionKind::MultFc => "mult_fc",
            FusionKind::WeightedAvg => "weighted_avg",
            FusionKind::Tensor => "tensor",
            FusionKind::Lmf => "lmf",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownFusion(s.to_string()))
    }
}

/// Knobs that only some heads read.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadOptions {
    pub similarity_offset: f64,
    pub shared_vertex_params: bool,
    pub lmf_rank: usize,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self {
            similarity_offset: crate::gfn::DEFAULT_SIMILARITY_OFFSET,
            shared_vertex_params: true,
            lmf_rank: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FusionHead {
    Gfn(GfnParams),
    ConcatFc {
        dec: DecisionHead,
    },
    MultFc {
        dec: DecisionHead,
    },
    WeightedAvg {
        /// `[1, 3]` logits of the per-modality weights.
        logits: ParamId,
        dec: DecisionHead,
    },
    Tensor {
        dec: DecisionHead,
    },
    Lmf {
        /// Per modality, `[rank·N, k+1]`: row `r·N + n` is the rank-`r`
        /// factor's column for output `n`.
        factors: [ParamId; 3],
        bias: ParamId,
        rank: usize,
        num_classes: usize,
    },
}

/// `(x_a ⊕ 1) ⊗ (x_v ⊕ 1) ⊗ (x_l ⊕ 1)`, flattened per row to `(k+1)³`.
pub fn tensor_fusion_features(tape: &mut Tape<'_>, e: [Var; 3]) -> Result<Var> {
    let k = tape.shape(e[0])[1];
    if k > TENSOR_FUSION_MAX_K {
        return Err(Error::TensorFusionTooLarge(k));
    }
    let [a, v, l] = with_bias_column(tape, e)?;
    let av = tape.row_outer(a, v)?;
    tape.row_outer(av, l)
}

fn with_bias_column(tape: &mut Tape<'_>, e: [Var; 3]) -> Result<[Var; 3]> {
    let rows = tape.shape(e[0])[0];
    let ones = tape.constant(Array2::ones((rows, 1)));
    let mut out = [e[0]; 3];
    for (i, v) in e.into_iter().enumerate() {
        out[i] = tape.concat_cols(&[v, ones])?;
    }
    Ok(out)
}

impl FusionHead {
    pub fn new(
        kind: FusionKind,
        store: &mut ParamStore,
        embed_dim: usize,
        num_classes: usize,
        opts: HeadOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k = embed_dim;
        let n = num_classes;
        Ok(match kind {
            FusionKind::Gfn => FusionHead::Gfn(GfnParams::new(
                store,
                k,
                n,
                opts.similarity_offset,
                opts.shared_vertex_params,
                rng,
            )),
            FusionKind::ConcatFc => FusionHead::ConcatFc {
                dec: DecisionHead::new(store, "concat_fc.dec", 3 * k, k, n, rng),
            },
            FusionKind::MultFc => FusionHead::MultFc {
                dec: DecisionHead::new(store, "mult_fc.dec", k, k, n, rng),
            },
            FusionKind::WeightedAvg => FusionHead::WeightedAvg {
                logits: store.add("weighted_avg.logits", Array2::zeros((1, 3))),
                dec: DecisionHead::new(store, "weighted_avg.dec", k, k, n, rng),
            },
            FusionKind::Tensor => {
                if k > TENSOR_FUSION_MAX_K {
                    return Err(Error::TensorFusionTooLarge(k));
                }
                FusionHead::Tensor {
                    dec: DecisionHead::new(store, "tensor.dec", (k + 1).pow(3), k, n, rng),
                }
            }
            FusionKind::Lmf => {
                let rank = opts.lmf_rank;
                if rank == 0 {
                    return Err(Error::InvalidConfig("lmf_rank must be positive".into()));
                }
                let factors = ["a", "v", "l"]
                    .map(|m| store.add(format!("lmf.factor.{m}"), glorot_uniform(rng, rank * n, k + 1)));
                FusionHead::Lmf {
                    factors,
                    bias: store.add("lmf.bias", Array2::zeros((1, n))),
                    rank,
                    num_classes: n,
                }
            }
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionHead::Gfn(_) => FusionKind::Gfn,
            FusionHead::ConcatFc { .. } => FusionKind::ConcatFc,
            FusionHead::MultFc { .. } => FusionKind::MultFc,
            FusionHead::WeightedAvg { .. } => FusionKind::WeightedAvg,
            FusionHead::Tensor { .. } => FusionKind::Tensor,
            FusionHead::Lmf { .. } => FusionKind::Lmf,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            FusionHead::Gfn(g) => g.params(),
            FusionHead::ConcatFc { dec } | FusionHead::MultFc { dec } | FusionHead::Tensor { dec } => dec.params(),
            FusionHead::WeightedAvg { logits, dec } => {
                let mut p = vec![*logits];
                p.extend(dec.params());
                p
            }
            FusionHead::Lmf { factors, bias, .. } => {
                let mut p = factors.to_vec();
                p.push(*bias);
                p
            }
        }
    }

    /// Softmax weights of the weighted-average head, `[1, 3]`.
    pub fn modality_weights(&self, tape: &mut Tape<'_>) -> Option<Var> {
        match self {
            FusionHead::WeightedAvg { logits, .. } => {
                let l = tape.param(*logits);
                Some(tape.softmax_rows(l))
            }
            _ => None,
        }
    }

    /// Pre-softmax output of the low-rank head:
    /// `Σ_r Π_m (z_m · W_m^{(r)}) + b` with `z_m = x_m ⊕ 1`.
    pub fn lmf_logits(&self, tape: &mut Tape<'_>, e: [Var; 3]) -> Result<Option<Var>> {
        let FusionHead::Lmf {
            factors,
            bias,
            rank,
            num_classes,
        } = self
        else {
            return Ok(None);
        };
        let z = with_bias_column(tape, e)?;
        let mut prod = None;
        for (zm, f) in z.into_iter().zip(factors) {
            let w = tape.param(*f);
            let proj = tape.matmul_t(zm, w)?;
            prod = Some(match prod {
                None => proj,
                Some(p) => tape.mul(p, proj)?,
            });
        }
        let prod = prod.expect("three modalities");
        let blocks = (0..*rank)
            .map(|r| tape.slice_cols(prod, r * num_classes, *num_classes))
            .collect::<Result<Vec<_>>>()?;
        let summed = tape.add_all(&blocks)?;
        let b = tape.param(*bias);
        Ok(Some(tape.add(summed, b)?))
    }

    /// Decision `[batch, N]` (rows sum to one) from embeddings in `a, v, l`
    /// order.
    pub fn fuse(&self, tape: &mut Tape<'_>, e: [Var; 3]) -> Result<Var> {
        match self {
            FusionHead::Gfn(g) => Ok(g.forward(tape, e)?.decision),
            FusionHead::ConcatFc { dec } => {
                let cat = tape.concat_cols(&e)?;
                dec.forward(tape, cat)
            }
            FusionHead::MultFc { dec } => {
                let av = tape.mul(e[0], e[1])?;
                let avl = tape.mul(av, e[2])?;
                dec.forward(tape, avl)
            }
            FusionHead::WeightedAvg { dec, .. } => {
                let w = self.modality_weights(tape).expect("weighted head");
                let avg = crate::gfn::weighted_sum(tape, w, &e)?;
                dec.forward(tape, avg)
            }
            FusionHead::Tensor { dec } => {
                let z = tensor_fusion_features(tape, e)?;
                dec.forward(tape, z)
            }
            FusionHead::Lmf { .. } => {
                let logits = self.lmf_logits(tape, e)?.expect("lmf head");
                Ok(tape.softmax_rows(logits))
            }
        }
    }
}
