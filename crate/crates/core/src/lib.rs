//! Adversarial joint-embedding and graph fusion for three-modality
//! classification.
//!
//! Three per-modality encoders map acoustic, visual and language features
//! into a shared `k`-dimensional space. A discriminator pulls the two source
//! modalities toward the target modality's distribution, decoders keep the
//! embeddings reconstructive and a shared classifier keeps them
//! label-discriminative. A hierarchical graph fusion network then combines
//! unimodal, bimodal and trimodal interactions into a final decision.
//!
//! Everything runs on the small reverse-mode engine in [`numcore`].

pub mod data;
pub mod error;
pub mod gfn;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod numcore;
pub mod zoo;

pub use data::{FeatureBundle, ModalityBatch, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use gfn::{GfnGraph, GfnParams};
pub use harness::{ArgfModel, MetricsReport, RunConfig};
pub use model::{EmbeddingStage, LossBreakdown, Modality};
pub use numcore::{ParamStore, Tape, Tensor, Var};
pub use zoo::{FusionHead, FusionKind};
