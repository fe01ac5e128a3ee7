//! Dense tensors, reverse-mode differentiation, layers and Adam.

mod adam;
mod layer;
mod params;
mod tape;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use layer::{glorot_uniform, Activation, DenseLayer, Sequential, LEAKY_SLOPE};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Dense row-major matrix; vectors are `[1, n]` rows and batches are
/// `[batch, features]`.
pub type Tensor = ndarray::Array2<f64>;

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    tape::sigmoid(x)
}
