//! Dense tensors and a tape-style reverse-mode differentiation engine.
//!
//! A [`Graph`] is an append-only list of nodes. Every operator evaluates its
//! output eagerly when recorded, so a node's inputs always precede it and the
//! list is acyclic by construction. Leaves are either variables (gradients are
//! reported for them) or constants. [`Graph::backward`] walks the list in
//! reverse and accumulates vector-Jacobian products.
//!
//! Graphs are rebuilt per objective evaluation, or re-evaluated in place with
//! new variable values via [`Graph::reevaluate`].

pub mod gradcheck;
mod ops;
mod tensor;

use std::sync::Arc;

pub use tensor::{Precision, Tensor};

use crate::error::{shape_err, Error, Result};
use ops::Op;

pub(crate) use ops::gram_raw;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    aux: Vec<usize>,
    variable: bool,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Gradients of a scalar with respect to every variable of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `node`, zero-filled when the loss does not depend on it.
    pub fn get(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn take(&mut self, node: NodeId) -> Tensor {
        self.grads[node.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node.0]))
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, mut value: Tensor, variable: bool) -> NodeId {
        self.precision.round(value.data_mut());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            aux: Vec::new(),
            variable,
            requires_grad: variable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        self.nodes[node.0].value.shape()
    }

    fn record(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let (mut value, aux) = op.forward(&values)?;
        self.precision.round(value.data_mut());
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            aux,
            variable: false,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Div, &[a, b])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(Op::AddScalar(s), &[a])
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(Op::MulScalar(s), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Square, &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sqrt, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Log, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Exp, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu, &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.record(Op::Conv2d, &[input, kernel])
    }

    pub fn maxpool2d(&mut self, input: NodeId, time: usize, freq: usize) -> Result<NodeId> {
        self.record(Op::MaxPool2d { time, freq }, &[input])
    }

    pub fn channel_affine(&mut self, input: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.record(Op::ChannelAffine, &[input, scale, shift])
    }

    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.record(Op::Sum { axes: axes.to_vec() }, &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum_axes(a, &axes)
    }

    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.record(Op::Mean { axes: axes.to_vec() }, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        self.record(Op::Concat { axis }, parts)
    }

    pub fn gather(&mut self, a: NodeId, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<NodeId> {
        self.record(
            Op::Gather {
                indices,
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(Op::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn gram(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Gram, &[a])
    }

    /// `sum((a - b)²)` as a scalar node.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.sum_all(sq)
    }

    /// Replaces leaf values and recomputes every derived node in order.
    pub fn reevaluate(&mut self, updates: &[(NodeId, Tensor)]) -> Result<()> {
        for (node, value) in updates {
            let n = &mut self.nodes[node.0];
            if !matches!(n.op, Op::Leaf) {
                return Err(Error::InvalidArgument(format!("node {} is not a leaf", node.0)));
            }
            if n.value.shape() != value.shape() {
                return Err(shape_err(
                    "reevaluate",
                    format!("{:?} vs {:?}", n.value.shape(), value.shape()),
                ));
            }
            n.value = value.clone();
            self.precision.round(n.value.data_mut());
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (mut value, aux) = {
                let node = &self.nodes[i];
                let values: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j.0].value).collect();
                node.op.forward(&values)?
            };
            self.precision.round(value.data_mut());
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        Ok(())
    }

    /// Gradient of a scalar node with respect to every variable.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::ones(v.shape()))])
    }

    /// Vector-Jacobian product for arbitrary output seeds, summed.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (node, seed) in seeds {
            if seed.shape() != self.shape(*node) {
                return Err(shape_err(
                    "backward",
                    format!("seed {:?} for node {:?}", seed.shape(), self.shape(*node)),
                ));
            }
            accumulate(&mut grads[node.0], seed.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j.0].requires_grad).collect();
            let input_grads = node.op.backward(&inputs, &node.value, &node.aux, &grad, &needs);
            for ((&j, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                if let (true, Some(mut g)) = (need, g) {
                    self.precision.round(g.data_mut());
                    accumulate(&mut grads[j.0], g);
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.variable {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
