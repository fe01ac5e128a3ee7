use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Negative-side slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
    LeakyRelu,
    Softmax,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Softmax => tape.softmax_rows(x),
        }
    }
}

/// Glorot-uniform matrix of shape `[fan_out, fan_in]`.
pub fn glorot_uniform(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit))
}

/// Fully connected layer `activation(x · Wᵀ + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot_uniform(rng, out_dim, in_dim));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "dense_forward",
                lhs: shape,
                rhs: [self.out_dim, self.in_dim],
            });
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matmul_t(x, w)?;
        let z = tape.add(z, b)?;
        Ok(self.activation.apply(tape, z))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).fill(0.0);
        store.get_mut(self.bias).fill(0.0);
    }
}

/// A chain of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<DenseLayer>,
}

impl Sequential {
    /// Builds layers from `(out_dim, activation)` pairs starting at `in_dim`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        spec: &[(usize, Activation)],
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(spec.len());
        let mut width = in_dim;
        for (i, &(out, act)) in spec.iter().enumerate() {
            layers.push(DenseLayer::new(store, &format!("{name}.{i}"), width, out, act, rng));
            width = out;
        }
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(tape, h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(DenseLayer::params).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            layer.zero(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(store: &mut ParamStore, i: usize, o: usize, act: Activation) -> DenseLayer {
        DenseLayer::new(store, "l", i, o, act, &mut ChaCha8Rng::seed_from_u64(1))
    }

    #[test]
    fn identity_linear() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 2, 2, Activation::Linear);
        store.set(l.weight, array![[1.0, 0.0], [0.0, 1.0]]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[1.0, -2.0]]);
        let y = l.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &array![[1.0, -2.0]]);
    }

    #[test]
    fn zero_sigmoid_is_half() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 3, 4, Activation::Sigmoid);
        l.zero(&mut store);
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[5.0, -1.0, 2.0], [0.3, 0.0, 9.0]]);
        let y = l.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn softmax_singleton() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 2, 1, Activation::Softmax);
        store.set(l.weight, array![[1.0, 1.0]]);
        store.set(l.bias, array![[0.0]]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[0.7, -3.0]]);
        let y = l.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &array![[1.0]]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 3, 2, Activation::Linear);
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[1.0, 2.0]]);
        let err = l.forward(&mut tape, x).unwrap_err().to_string();
        assert!(err.contains("[1, 2]") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn glorot_bounds() {
        let w = glorot_uniform(&mut ChaCha8Rng::seed_from_u64(3), 10, 6);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(w.iter().all(|x| x.abs() <= limit));
    }
}
