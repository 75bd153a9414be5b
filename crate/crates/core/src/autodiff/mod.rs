//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive application in execution order, so the
//! node table is already topologically sorted. [`Tape::backward`] walks it in
//! reverse and accumulates gradients additively; a node consumed twice (for
//! example a parameter shared by two branches) receives the sum of both
//! contributions.

mod gradcheck;
mod params;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Parameter, ParamSet};

use crate::error::{shape_err, Result};
use crate::nn::loss;
use crate::tensor::kernels::{self, PoolIndices};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How rectifiers route gradients in the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReluRule {
    /// Pass the gradient where the forward input was positive.
    #[default]
    Standard,
    /// Additionally drop negative gradient components (guided backprop).
    Guided,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    SumSquares(NodeId),
    Relu(NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
    },
    MaxPool {
        input: NodeId,
        indices: PoolIndices,
    },
    Affine {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    SigmoidCe {
        logits: NodeId,
        targets: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records an input. Gradients are only computed for leaves created with
    /// `requires_grad` and for nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::elementwise_mul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_squares());
        let rg = self.any_grad(&[a]);
        self.push(v, Op::SumSquares(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = kernels::relu(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = kernels::conv2d(self.value(input), self.value(kernels), self.value(bias))?;
        let rg = self.any_grad(&[input, kernels, bias]);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernels,
                bias,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, indices) = kernels::maxpool2d(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(v, Op::MaxPool { input, indices }, rg))
    }

    pub fn affine(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = kernels::affine(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.any_grad(&[input, weights, bias]);
        Ok(self.push(
            v,
            Op::Affine {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let (value, probs) = loss::softmax_cross_entropy_with_probs(self.value(logits), label)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    pub fn sigmoid_cross_entropy(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let value = loss::sigmoid_cross_entropy(self.value(logits), targets)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SigmoidCe {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of a scalar node with respect to everything it depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self.value(loss);
        if !v.is_scalar() {
            return Err(shape_err!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                v.shape()
            ));
        }
        self.backward_from(loss, Tensor::new(v.shape().to_vec(), vec![1.0])?, ReluRule::Standard)
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_from(&self, root: NodeId, seed: Tensor, rule: ReluRule) -> Result<Gradients> {
        self.value(root).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, rule, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        rule: ReluRule,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut send = |id: NodeId, t: Tensor| -> Result<()> {
            if !self.nodes[id.0].requires_grad {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                if wants(*b) {
                    send(*b, g.map(|x| -x))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, kernels::elementwise_mul(g, self.value(*b))?)?;
                }
                if wants(*b) {
                    send(*b, kernels::elementwise_mul(g, self.value(*a))?)?;
                }
            }
            Op::Scale(a, f) => send(*a, g.map(|x| x * f))?,
            Op::Sum(a) => {
                let s = g.item()?;
                send(*a, Tensor::full(self.value(*a).shape().to_vec(), s)?)?;
            }
            Op::SumSquares(a) => {
                let s = g.item()?;
                send(*a, self.value(*a).map(|x| 2.0 * s * x))?;
            }
            Op::Relu(a) => {
                let d = match rule {
                    ReluRule::Standard => kernels::relu_backward(self.value(*a), g)?,
                    ReluRule::Guided => self.value(*a).zip_map(g, |x, gv| {
                        if x > 0.0 && gv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?,
                };
                send(*a, d)?;
            }
            Op::Conv2d {
                input,
                kernels: k,
                bias,
            } => {
                let cg = kernels::conv2d_backward(self.value(*input), self.value(*k), g, wants(*input))?;
                if let Some(dx) = cg.input {
                    send(*input, dx)?;
                }
                send(*k, cg.kernels)?;
                send(*bias, cg.bias)?;
            }
            Op::MaxPool { input, indices } => {
                send(*input, kernels::maxpool2d_backward(indices, g)?)?;
            }
            Op::Affine {
                input,
                weights,
                bias,
            } => {
                let (dx, dw, db) =
                    kernels::affine_backward(self.value(*input), self.value(*weights), g, wants(*input))?;
                if let Some(dx) = dx {
                    send(*input, dx)?;
                }
                send(*weights, dw)?;
                send(*bias, db)?;
            }
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            } => {
                let s = g.item()?;
                let mut d: Vec<f64> = probs.iter().map(|p| s * p).collect();
                d[*label] -= s;
                send(*logits, Tensor::new(self.value(*logits).shape().to_vec(), d)?)?;
            }
            Op::SigmoidCe { logits, targets } => {
                let s = g.item()? / targets.len() as f64;
                let x = self.value(*logits);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&xi, &t)| s * (loss::sigmoid(xi) - t))
                    .collect();
                send(*logits, Tensor::new(x.shape().to_vec(), d)?)?;
            }
        }
        Ok(())
    }
}

/// Result of a backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `id`, if it was reached and requires gradients.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros shaped like its value when unreached.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| tape.value(id).zeros_like())
    }
}
