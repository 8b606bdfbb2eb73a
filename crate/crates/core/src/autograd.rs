//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A graph is an append-only list of nodes. Every node records the operation
//! that produced it, the ids of its inputs (always earlier nodes) and its
//! output tensor. Parameters enter the graph exactly once through
//! [`Graph::param`]; any number of later nodes may consume that single node,
//! and [`Graph::backward`] sums the contributions arriving from each consumer.
//! That additive accumulation is what lets weight-shared branches train as one
//! parameter set.
//!
//! Parameter values are borrowed from the caller's store for the lifetime of
//! the graph, so building a graph never copies weights.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{self, DropoutMask};
use crate::tensor::{self, Conv2dGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable tensor in a [`crate::layers::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Param(ParamId),
    MatMul,
    AddBias,
    Add,
    Relu,
    Scale(f64),
    Reshape(Vec<usize>),
    FlipWidth,
    Conv2d(Conv2dGeometry),
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    /// Batch normalization using statistics of the current batch.
    BatchNorm {
        eps: f64,
    },
    /// Batch normalization with fixed (running) statistics.
    BatchNormFrozen {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Dropout {
        keep: Vec<bool>,
        scale: f64,
    },
    SoftmaxXent {
        labels: Vec<usize>,
    },
    /// Arithmetic mean of scalar inputs.
    Mean,
    SumSquares,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul => "matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Relu => "relu",
            Op::Scale(_) => "scale",
            Op::Reshape(_) => "reshape",
            Op::FlipWidth => "flip_width",
            Op::Conv2d(_) => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::BatchNormFrozen { .. } => "batchnorm_frozen",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Mean => "mean",
            Op::SumSquares => "sum_squares",
        }
    }
}

/// Forward-pass byproducts that backward rules need.
#[derive(Clone, Debug, Default)]
enum Aux {
    #[default]
    None,
    Argmax(Vec<usize>),
    Norm(layers::NormCache),
    Probs(Tensor),
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'p> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Value<'p>,
    aux: Aux,
    requires_grad: bool,
}

/// Per-parameter gradients, keyed and iterated in [`ParamId`] order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }

    /// Largest entrywise difference over all parameters; `inf` if the key
    /// sets or shapes differ.
    pub fn max_abs_diff(&self, other: &GradientMap) -> f64 {
        if self.grads.len() != other.grads.len() {
            return f64::INFINITY;
        }
        self.grads
            .iter()
            .map(|(k, v)| other.grads.get(k).map_or(f64::INFINITY, |o| v.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }

    /// Entrywise sum of two maps over the same parameters.
    pub fn add(&self, other: &GradientMap) -> Result<GradientMap> {
        let mut out = self.clone();
        for (k, v) in &other.grads {
            match out.grads.get_mut(k) {
                Some(t) => t.add_assign(v)?,
                None => {
                    out.grads.insert(*k, v.clone());
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> GradientMap {
        GradientMap { grads: self.grads.iter().map(|(k, v)| (*k, v.scale(s))).collect() }
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: BTreeMap<ParamId, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.get()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Trainable parameters registered in this graph, one entry per parameter.
    pub fn parameters(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.params.iter().map(|(&p, &n)| (p, n))
    }

    /// Batch mean and variance computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].aux {
            Aux::Norm(c) => Some((&c.mean, &c.var)),
            _ => None,
        }
    }

    /// A constant input. Receives no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Value::Owned(value),
            aux: Aux::None,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable parameter. Registering the same id twice returns
    /// the node created the first time.
    pub fn param(&mut self, id: ParamId, value: &'p Tensor) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            inputs: Vec::new(),
            value: Value::Borrowed(value),
            aux: Aux::None,
            requires_grad: true,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.insert(id, node);
        node
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let (value, aux) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
            eval(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, value: Value::Owned(value), aux, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias, vec![x, bias])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(s), vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Reshape(shape), vec![x])
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let rows = shape[0];
        let cols = shape[1..].iter().product();
        if shape.len() == 2 {
            return Ok(x);
        }
        self.reshape(x, vec![rows, cols])
    }

    pub fn flip_width(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::FlipWidth, vec![x])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, geo: Conv2dGeometry) -> Result<NodeId> {
        self.push(Op::Conv2d(geo), vec![x, w])
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.push(Op::MaxPool2d { window, stride }, vec![x])
    }

    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::BatchNorm { eps }, vec![x, gamma, beta])
    }

    pub fn batchnorm_frozen(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> Result<NodeId> {
        self.push(Op::BatchNormFrozen { mean, var, eps }, vec![x, gamma, beta])
    }

    /// Train-mode inverted dropout with an explicit mask.
    pub fn dropout(&mut self, x: NodeId, mask: &DropoutMask) -> Result<NodeId> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::dim(format!(
                "dropout mask covers {} positions, activation has {}",
                mask.len(),
                self.value(x).numel()
            )));
        }
        self.push(Op::Dropout { keep: mask.keep().to_vec(), scale: mask.scale() }, vec![x])
    }

    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(Op::SoftmaxXent { labels: labels.to_vec() }, vec![logits])
    }

    pub fn mean(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        if scalars.is_empty() {
            return Err(Error::contract("mean of zero values"));
        }
        self.push(Op::Mean, scalars.to_vec())
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SumSquares, vec![x])
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// registered parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", seed.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(seed.shape(), 1.0));
        let mut out = GradientMap::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match node.op {
                Op::Param(pid) => {
                    out.insert(pid, g);
                    continue;
                }
                Op::Leaf => continue,
                _ => {}
            }
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i.0].requires_grad).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| self.value(i)).collect();
            let contribs = backward_op(&node.op, &node.aux, &vals, node.value.get(), &g, &needs)?;
            for (&input, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot @ None => *slot = Some(c),
                }
            }
        }

        for (&pid, &node) in &self.params {
            if out.get(pid).is_none() {
                out.insert(pid, Tensor::zeros(self.value(node).shape()));
            }
        }
        Ok(out)
    }

    /// Re-evaluates the graph up to `target` with one parameter replaced,
    /// recomputing only nodes downstream of it.
    pub fn replay_with(&self, target: NodeId, param: ParamId, value: &Tensor) -> Result<Tensor> {
        let mut values: Vec<Cow<'_, Tensor>> = Vec::with_capacity(target.0 + 1);
        let mut dirty = vec![false; target.0 + 1];
        for id in 0..=target.0 {
            let node = &self.nodes[id];
            let v = match node.op {
                Op::Param(pid) if pid == param => {
                    dirty[id] = true;
                    Cow::Owned(value.clone())
                }
                _ if node.inputs.iter().any(|i| dirty[i.0]) => {
                    dirty[id] = true;
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|i| values[i.0].as_ref()).collect();
                    Cow::Owned(eval(&node.op, &ins)?.0)
                }
                _ => Cow::Borrowed(node.value.get()),
            };
            values.push(v);
        }
        Ok(values.swap_remove(target.0).into_owned())
    }
}

/// Maximum over all parameter entries of
/// `|analytic − central difference| / max(1, |central difference|)`.
pub fn grad_check(graph: &Graph<'_>, loss: NodeId, step: f64) -> Result<f64> {
    let analytic = graph.backward(loss)?;
    grad_check_against(graph, loss, step, &analytic)
}

/// Like [`grad_check`] but compares against a caller-supplied gradient map.
pub fn grad_check_against(graph: &Graph<'_>, loss: NodeId, step: f64, analytic: &GradientMap) -> Result<f64> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut worst: f64 = 0.0;
    for (pid, node) in graph.parameters() {
        let base = graph.value(node);
        let grad = analytic.get(pid).ok_or_else(|| Error::contract(format!("no analytic gradient for {pid:?}")))?;
        let mut probe = base.clone();
        for i in 0..base.numel() {
            let orig = base.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = graph.replay_with(loss, pid, &probe)?.item()?;
            probe.data_mut()[i] = orig - step;
            let down = graph.replay_with(loss, pid, &probe)?.item()?;
            probe.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let err = (grad.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn expect_scalar(t: &Tensor, what: &str) -> Result<f64> {
    t.item().map_err(|_| Error::dim(format!("{what}: expected scalar input")))
}

fn eval(op: &Op, ins: &[&Tensor]) -> Result<(Tensor, Aux)> {
    let plain = |t: Tensor| Ok((t, Aux::None));
    match op {
        Op::Leaf | Op::Param(_) => Err(Error::contract("leaf nodes are not evaluated")),
        Op::MatMul => plain(tensor::matmul(ins[0], ins[1])?),
        Op::AddBias => plain(tensor::add_bias(ins[0], ins[1])?),
        Op::Add => plain(ins[0].add(ins[1])?),
        Op::Relu => plain(tensor::relu(ins[0])),
        Op::Scale(s) => plain(ins[0].scale(*s)),
        Op::Reshape(shape) => plain(ins[0].clone().reshape(shape.clone())?),
        Op::FlipWidth => plain(tensor::flip_width(ins[0])?),
        Op::Conv2d(geo) => plain(tensor::conv2d(ins[0], ins[1], *geo)?),
        Op::MaxPool2d { window, stride } => {
            let (y, arg) = tensor::maxpool2d(ins[0], *window, *stride)?;
            Ok((y, Aux::Argmax(arg)))
        }
        Op::BatchNorm { eps } => {
            let (y, cache) = layers::batchnorm_train_kernel(ins[0], ins[1], ins[2], *eps)?;
            Ok((y, Aux::Norm(cache)))
        }
        Op::BatchNormFrozen { mean, var, eps } => {
            let (y, cache) = layers::batchnorm_frozen_kernel(ins[0], ins[1], ins[2], mean, var, *eps)?;
            Ok((y, Aux::Norm(cache)))
        }
        Op::Dropout { keep, scale } => plain(layers::dropout_kernel(ins[0], keep, *scale)),
        Op::SoftmaxXent { labels } => {
            let (loss, probs) = layers::softmax_xent_kernel(ins[0], labels)?;
            Ok((Tensor::scalar(loss), Aux::Probs(probs)))
        }
        Op::Mean => {
            let mut sum = 0.0;
            for t in ins {
                sum += expect_scalar(t, "mean")?;
            }
            plain(Tensor::scalar(sum / ins.len() as f64))
        }
        Op::SumSquares => plain(Tensor::scalar(ins[0].data().iter().map(|v| v * v).sum())),
    }
}

fn backward_op(
    op: &Op,
    aux: &Aux,
    ins: &[&Tensor],
    _out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let only = |t: Tensor| Ok(vec![Some(t)]);
    match op {
        Op::Leaf | Op::Param(_) => Ok(Vec::new()),
        Op::MatMul => Ok(vec![
            if needs[0] { Some(tensor::matmul_nt(g, ins[1])?) } else { None },
            if needs[1] { Some(tensor::matmul_tn(ins[0], g)?) } else { None },
        ]),
        Op::AddBias => {
            let gb = if needs[1] {
                let n = ins[1].numel();
                let mut sums = vec![0.0; n];
                for row in g.data().chunks_exact(n) {
                    for (s, v) in sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                Some(Tensor::from_parts(vec![n], sums))
            } else {
                None
            };
            Ok(vec![needs[0].then(|| g.clone()), gb])
        }
        Op::Add => Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        Op::Relu => {
            let data = ins[0].data().iter().zip(g.data()).map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 }).collect();
            only(Tensor::from_parts(g.shape().to_vec(), data))
        }
        Op::Scale(s) => only(g.scale(*s)),
        Op::Reshape(_) => only(g.clone().reshape(ins[0].shape().to_vec())?),
        Op::FlipWidth => only(tensor::flip_width(g)?),
        Op::Conv2d(geo) => {
            let (gx, gw) = tensor::conv2d_backward(ins[0], ins[1], g, *geo, needs[0], needs[1])?;
            Ok(vec![gx, gw])
        }
        Op::MaxPool2d { .. } => {
            let Aux::Argmax(arg) = aux else {
                return Err(Error::contract("maxpool node lost its argmax"));
            };
            let mut gx = vec![0.0; ins[0].numel()];
            for (&src, &gv) in arg.iter().zip(g.data()) {
                gx[src] += gv;
            }
            only(Tensor::from_parts(ins[0].shape().to_vec(), gx))
        }
        Op::BatchNorm { .. } | Op::BatchNormFrozen { .. } => {
            let Aux::Norm(cache) = aux else {
                return Err(Error::contract("batchnorm node lost its cache"));
            };
            let frozen = matches!(op, Op::BatchNormFrozen { .. });
            let (gx, gg, gb) = layers::batchnorm_backward_kernel(ins[0], ins[1], cache, g, frozen)?;
            Ok(vec![needs[0].then_some(gx), needs[1].then_some(gg), needs[2].then_some(gb)])
        }
        Op::Dropout { keep, scale } => only(layers::dropout_kernel(g, keep, *scale)),
        Op::SoftmaxXent { labels } => {
            let Aux::Probs(probs) = aux else {
                return Err(Error::contract("softmax node lost its probabilities"));
            };
            let scale = g.item()? / labels.len() as f64;
            let k = probs.shape()[1];
            let mut grad = probs.data().to_vec();
            for (row, &label) in grad.chunks_exact_mut(k).zip(labels) {
                row[label] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            only(Tensor::from_parts(probs.shape().to_vec(), grad))
        }
        Op::Mean => {
            let share = g.item()? / ins.len() as f64;
            Ok(ins.iter().zip(needs).map(|(t, &n)| n.then(|| Tensor::full(t.shape(), share))).collect())
        }
        Op::SumSquares => {
            let gv = g.item()?;
            only(ins[0].map(|v| 2.0 * v * gv))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &x);
        let loss = g.sum_squares(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shared_weight_accumulates_both_uses() {
        // y = w·a + w·b  =>  dy/dw = a + b
        let w = Tensor::matrix(1, 3, vec![0.3, -0.7, 1.1]).unwrap();
        let a = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![-4.0, 0.5, 2.0]).unwrap();
        let mut g = Graph::new();
        let wn = g.param(ParamId(0), &w);
        let an = g.input(a);
        let bn = g.input(b);
        let wa = g.matmul(wn, an).unwrap();
        let wb = g.matmul(wn, bn).unwrap();
        let y = g.add(wa, wb).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[-3.0, 2.5, 5.0]);
    }

    #[test]
    fn param_registers_once() {
        let w = Tensor::scalar(2.0);
        let mut g = Graph::new();
        let a = g.param(ParamId(7), &w);
        let b = g.param(ParamId(7), &w);
        assert_eq!(a, b);
        assert_eq!(g.parameters().count(), 1);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let w = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &w);
        let r = g.relu(p).unwrap();
        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let w = Tensor::scalar(3.0);
        let unused = Tensor::zeros(&[2, 2]);
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &w);
        g.param(ParamId(1), &unused);
        let l = g.sum_squares(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ParamId(1)).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn grad_check_on_quadratic_is_tight() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &x);
        let l = g.sum_squares(p).unwrap();
        assert!(grad_check(&g, l, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn grad_check_flags_corrupted_gradient() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.5]).unwrap();
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &x);
        let l = g.sum_squares(p).unwrap();
        let good = g.backward(l).unwrap();
        let mut bad = good.clone();
        let mut t = good.get(ParamId(0)).unwrap().clone();
        t.data_mut()[1] += 0.1;
        bad.insert(ParamId(0), t);
        assert!(grad_check_against(&g, l, 1e-5, &bad).unwrap() > 1e-2);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let x = Tensor::scalar(1.0);
        let mut g = Graph::new();
        let p = g.param(ParamId(0), &x);
        let l = g.sum_squares(p).unwrap();
        assert!(grad_check(&g, l, 0.0).is_err());
    }

    #[test]
    fn separate_losses_backward_adds() {
        let w = Tensor::matrix(2, 2, vec![0.5, -0.25, 1.5, 0.75]).unwrap();
        let x1 = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let x2 = Tensor::matrix(1, 2, vec![-3.0, 0.5]).unwrap();

        let single = |x: &Tensor| {
            let mut g = Graph::new();
            let wn = g.param(ParamId(0), &w);
            let xn = g.input(x.clone());
            let y = g.matmul(xn, wn).unwrap();
            let l = g.sum_squares(y).unwrap();
            g.backward(l).unwrap()
        };
        let mut g = Graph::new();
        let wn = g.param(ParamId(0), &w);
        let a = g.input(x1.clone());
        let b = g.input(x2.clone());
        let ya = g.matmul(a, wn).unwrap();
        let yb = g.matmul(b, wn).unwrap();
        let la = g.sum_squares(ya).unwrap();
        let lb = g.sum_squares(yb).unwrap();
        let total = g.add(la, lb).unwrap();
        let joint = g.backward(total).unwrap();
        let sum = single(&x1).add(&single(&x2)).unwrap();
        assert!(joint.max_abs_diff(&sum) < 1e-12);
    }
}
