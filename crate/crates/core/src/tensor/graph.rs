//! Wengert-style tape for reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so node ids strictly increase along dependencies and a
//! single reverse sweep visits every node after all of its consumers.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Stable identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(id: ParamId, name: impl Into<String>, value: Tensor) -> Self {
        Self {
            id,
            name: name.into(),
            value,
        }
    }
}

/// Anything that owns trainable parameters in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation that produced a node, with whatever backward needs beyond
/// the input and output values.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    Relu(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanBatch(Var),
    SqDiffSum(Var, Var),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanBatch(..) => "mean_batch",
            Op::SqDiffSum(..) => "sq_diff_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records tensor operations for later differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// The leaf for `param`, created on first use and shared afterwards so
    /// gradients from every use accumulate into one node.
    pub fn param(&mut self, param: &Param) -> Var {
        if let Some(&v) = self.params.get(&param.id) {
            return v;
        }
        let v = self.push(
            param.value.clone(),
            Op::Leaf {
                param: Some(param.id),
            },
        );
        self.params.insert(param.id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Adds a bias vector to every row (batch-axis broadcast).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let out = self.value(a).scale_rows(factors)?;
        Ok(self.push(out, Op::ScaleRows(a, factors.to_vec())))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Concatenation along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// Mean over the batch (row) axis: `[n, m] -> [1, m]`.
    pub fn mean_batch(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_matrix() || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_batch",
                left: x.shape().to_vec(),
                right: vec![],
            });
        }
        let n = x.rows() as f64;
        let out = x.sum_rows().scale(1.0 / n).reshape([1, x.cols()])?;
        Ok(self.push(out, Op::MeanBatch(a)))
    }

    /// `Σ (a - b)²` as a scalar.
    pub fn sq_diff_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sq_diff_sum(self.value(b))?);
        Ok(self.push(out, Op::SqDiffSum(a, b)))
    }

    /// Gradients of the scalar `loss` with respect to every leaf (constants
    /// and parameters). Interior gradients are released during the sweep.
    pub fn backward_all(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.shape().is_empty() && loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let op_name = node.op.name();
            let send = |grads: &mut Vec<Option<Tensor>>, to: Var, g: Tensor| -> Result<()> {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient { op: op_name });
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    slot @ None => *slot = Some(g),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf { .. } => unreachable!("leaves are skipped above"),
                Op::MatMul(a, b) => {
                    let da = upstream.matmul_t(self.value(*b))?;
                    let db = self.value(*a).t_matmul(&upstream)?;
                    send(&mut grads, *a, da)?;
                    send(&mut grads, *b, db)?;
                }
                Op::MatMulT(a, b) => {
                    let da = upstream.matmul(self.value(*b))?;
                    let db = upstream.t_matmul(self.value(*a))?;
                    send(&mut grads, *a, da)?;
                    send(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, upstream.clone())?;
                    send(&mut grads, *b, upstream)?;
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, upstream.scale(-1.0))?;
                    send(&mut grads, *a, upstream)?;
                }
                Op::AddRow(a, bias) => {
                    send(&mut grads, *bias, upstream.sum_rows())?;
                    send(&mut grads, *a, upstream)?;
                }
                Op::Mul(a, b) => {
                    let da = upstream.mul(self.value(*b))?;
                    let db = upstream.mul(self.value(*a))?;
                    send(&mut grads, *a, da)?;
                    send(&mut grads, *b, db)?;
                }
                Op::Scale(a, c) => send(&mut grads, *a, upstream.scale(*c))?,
                Op::ScaleRows(a, f) => send(&mut grads, *a, upstream.scale_rows(f)?)?,
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = upstream.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?;
                    send(&mut grads, *a, da)?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = upstream.zip_map(x, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?;
                    send(&mut grads, *a, da)?;
                }
                Op::Concat(a, b) => {
                    let p = self.value(*a).cols();
                    let (da, db) = upstream.split_cols(p)?;
                    send(&mut grads, *a, da)?;
                    send(&mut grads, *b, db)?;
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    send(&mut grads, *a, Tensor::full(x.shape().to_vec(), upstream.item()))?;
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let g = upstream.item() / x.len() as f64;
                    send(&mut grads, *a, Tensor::full(x.shape().to_vec(), g))?;
                }
                Op::MeanBatch(a) => {
                    let x = self.value(*a);
                    let n = x.rows();
                    let row = upstream.scale(1.0 / n as f64);
                    let mut da = Tensor::zeros(x.shape().to_vec());
                    for i in 0..n {
                        da.row_mut(i).copy_from_slice(row.data());
                    }
                    send(&mut grads, *a, da)?;
                }
                Op::SqDiffSum(a, b) => {
                    let g = upstream.item();
                    let da = self
                        .value(*a)
                        .zip_map(self.value(*b), "sq_diff_sum", |x, y| 2.0 * g * (x - y))?;
                    send(&mut grads, *b, da.scale(-1.0))?;
                    send(&mut grads, *a, da)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` for each of `params`; parameters the loss does
    /// not reach get a zero gradient of matching shape.
    pub fn backward(&self, loss: Var, params: &[&Param]) -> Result<GradientMap> {
        let all = self.backward_all(loss)?;
        let mut map = BTreeMap::new();
        for p in params {
            let g = self
                .params
                .get(&p.id)
                .and_then(|&v| all.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            map.insert(p.id, g);
        }
        Ok(GradientMap(map))
    }
}

/// Per-node gradients from [`Graph::backward_all`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influences it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but zero-filled for unreachable nodes.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
    }
}

/// Parameter gradients keyed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(pub BTreeMap<ParamId, Tensor>);

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.0.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward_all(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn mean_of_pair() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2], vec![0.7, 4.0]).unwrap());
        let m = g.mean(x);
        let grads = g.backward_all(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 0.5);
    }

    #[test]
    fn forward_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let t = g.tanh(z);
        assert_eq!(g.value(t).item(), 0.0);
        let n = g.constant(Tensor::scalar(-2.5));
        let r = g.relu(n);
        assert_eq!(g.value(r).item(), 0.0);
        let v = g.constant(Tensor::new([4], vec![1., 2., 3., 6.]).unwrap());
        let m = g.mean(v);
        assert_eq!(g.value(m).item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 2]));
        assert!(matches!(g.backward_all(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn nan_reports_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(f64::NAN));
        let c = g.constant(Tensor::scalar(1.0));
        let y = g.mul(x, c).unwrap();
        match g.backward_all(y) {
            Err(Error::NonFiniteGradient { op }) => assert_eq!(op, "mul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let p = Param::new(ParamId(7), "w", Tensor::zeros([2, 3]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(2.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, &[&p]).unwrap();
        assert_eq!(grads.get(ParamId(7)).unwrap(), &Tensor::zeros([2, 3]));
    }

    #[test]
    fn shared_param_accumulates() {
        let p = Param::new(ParamId(0), "w", Tensor::scalar(2.0));
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.add(y, a).unwrap();
        let grads = g.backward(s, &[&p]).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().item(), 5.0);
    }
}
