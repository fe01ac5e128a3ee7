//! Define-by-run reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every op appends a node holding its value; [`Tape::backward`] walks the
//! nodes in reverse and accumulates vector-Jacobian products. Parameter leaves
//! are deduplicated, so a parameter used several times in one pass receives
//! the sum of its contributions.
//!
//! Binary element-wise ops broadcast 2-D shapes: each extent must match or be
//! one. Per-sample scalars are therefore `[batch, 1]` columns and a global
//! scalar is `[1, 1]`.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SumAll(Var),
    SumCols(Var),
    RowNorm(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    RowOuter(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient with respect to any node reached by the pass.
    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn dims(t: &Tensor) -> [usize; 2] {
    let (r, c) = t.dim();
    [r, c]
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2]> {
    let mut out = [0; 2];
    for i in 0..2 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a,
                    rhs: b,
                })
            }
        };
    }
    Ok(out)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: [usize; 2]) -> Tensor {
    let mut g = g;
    if shape[0] == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape[1] == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn bcast(t: &Tensor, shape: [usize; 2]) -> ndarray::ArrayView2<'_, f64> {
    t.broadcast((shape[0], shape[1]))
        .expect("shape validated at record time")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::RowOuter(a, b) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            Op::Concat(vs) => vs.iter().any(|v| self.nodes[v.0].requires_grad),
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Clamp(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::RowNorm(a)
            | Op::Slice(a, _) => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        dims(&self.nodes[v.0].value)
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x · wᵀ` for `x: [b, i]`, `w: [o, i]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: xs,
                rhs: ws,
            });
        }
        let value = self.value(x).dot(&self.value(w).t());
        Ok(self.push(value, Op::MatMulT(x, w)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let mut out = Array2::zeros((shape[0], shape[1]));
        Zip::from(&mut out)
            .and(bcast(self.value(a), shape))
            .and(bcast(self.value(b), shape))
            .for_each(|o, &x, &y| *o = f(x, y));
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Sum of several equally shaped (or broadcastable) nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars.split_first().expect("add_all needs at least one input");
        rest.iter().try_fold(*first, |acc, v| self.add(acc, *v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::Shift(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row /= total;
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Sum of all entries, as `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `[b, n] -> [b, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).ncols() as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row Euclidean norm, `[b, n] -> [b, 1]`. The gradient at a zero row
    /// is taken to be zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.push(value, Op::RowNorm(a))
    }

    /// Column-wise concatenation; all inputs share the row count.
    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let rows = self.shape(vars[0])[0];
        for v in vars {
            let sh = self.shape(*v);
            if sh[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(vars[0]),
                    rhs: sh,
                });
            }
        }
        let views: Vec<_> = vars.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        Ok(self.push(value, Op::Concat(vars.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(a);
        if start + len > sh[1] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: sh,
                rhs: [sh[0], start + len],
            });
        }
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(value, Op::Slice(a, start)))
    }

    /// Per-row flattened outer product: `out[r, i*m + j] = a[r, i] * b[r, j]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "row_outer",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, m) = (sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((sa[0], n * m));
        for r in 0..sa[0] {
            for i in 0..n {
                for j in 0..m {
                    out[[r, i * m + j]] = va[[r, i]] * vb[[r, j]];
                }
            }
        }
        Ok(self.push(out, Op::RowOuter(a, b)))
    }

    /// Reverse pass from a `[1, 1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = BTreeMap::new();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    params.insert(*id, g.clone());
                }
                Op::MatMulT(x, w) => {
                    let gx = g.dot(self.value(*w));
                    let gw = g.t().dot(self.value(*x));
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], reduce_to(g.clone(), self.shape(*a)));
                    accumulate(&mut grads[b.0], reduce_to(g.clone(), self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], reduce_to(g.clone(), self.shape(*a)));
                    accumulate(&mut grads[b.0], reduce_to(-&g, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let sh = dims(&g);
                    let ga = &g * &bcast(self.value(*b), sh);
                    let gb = &g * &bcast(self.value(*a), sh);
                    accumulate(&mut grads[a.0], reduce_to(ga, self.shape(*a)));
                    accumulate(&mut grads[b.0], reduce_to(gb, self.shape(*b)));
                }
                Op::Div(a, b) => {
                    let sh = dims(&g);
                    let bv = bcast(self.value(*b), sh);
                    let ga = &g / &bv;
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gb = -(&g * y) / &bv;
                    accumulate(&mut grads[a.0], reduce_to(ga, self.shape(*a)));
                    accumulate(&mut grads[b.0], reduce_to(gb, self.shape(*b)));
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g * *c),
                Op::Shift(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::Sigmoid(a) => {
                    accumulate(&mut grads[a.0], &g * &y.mapv(|s| s * (1.0 - s)))
                }
                Op::Tanh(a) => accumulate(&mut grads[a.0], &g * &y.mapv(|t| 1.0 - t * t)),
                Op::LeakyRelu(a, slope) => {
                    let d = self
                        .value(*a)
                        .mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                    accumulate(&mut grads[a.0], &g * &d)
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], &g * y),
                Op::Ln(a) => accumulate(&mut grads[a.0], &g / self.value(*a)),
                Op::Sqrt(a) => accumulate(&mut grads[a.0], &g / &(y * 2.0)),
                Op::Clamp(a, lo, hi) => {
                    let mask = self
                        .value(*a)
                        .mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                    accumulate(&mut grads[a.0], &g * &mask)
                }
                Op::SoftmaxRows(a) => {
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[a.0], y * &(&g - &dot));
                }
                Op::SumAll(a) => {
                    let sh = self.shape(*a);
                    accumulate(&mut grads[a.0], Array2::from_elem((sh[0], sh[1]), g[[0, 0]]))
                }
                Op::SumCols(a) => {
                    let sh = self.shape(*a);
                    let full = g.broadcast((sh[0], sh[1])).unwrap().to_owned();
                    accumulate(&mut grads[a.0], full)
                }
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let mut gx = x.clone();
                    for ((mut row, n), gr) in gx.rows_mut().into_iter().zip(y.iter()).zip(g.iter()) {
                        if *n > 0.0 {
                            row *= *gr / *n;
                        } else {
                            row.fill(0.0);
                        }
                    }
                    accumulate(&mut grads[a.0], gx)
                }
                Op::Concat(vars) => {
                    let mut start = 0;
                    for v in vars {
                        let w = self.shape(*v)[1];
                        accumulate(&mut grads[v.0], g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Slice(a, start) => {
                    let sh = self.shape(*a);
                    let mut full = Array2::zeros((sh[0], sh[1]));
                    full.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], full)
                }
                Op::RowOuter(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, m) = (va.ncols(), vb.ncols());
                    let mut ga = Array2::zeros(va.dim());
                    let mut gb = Array2::zeros(vb.dim());
                    for r in 0..va.nrows() {
                        for i in 0..n {
                            for j in 0..m {
                                let gij = g[[r, i * m + j]];
                                ga[[r, i]] += gij * vb[[r, j]];
                                gb[[r, j]] += gij * va[[r, i]];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

/// Logits are clamped to this magnitude so the sigmoid stays strictly inside
/// `(0, 1)` in double precision.
const SIGMOID_LOGIT_LIMIT: f64 = 36.0;

pub(crate) fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_LOGIT_LIMIT, SIGMOID_LOGIT_LIMIT);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
