use std::cell::RefCell;
use std::rc::Rc;

use super::{ops, Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Recorded operation. Indices refer to earlier nodes of the same graph.
pub(crate) enum Op<T> {
    Leaf,
    /// Result of an operation none of whose inputs require a gradient.
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    ScaleBy(usize, usize),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    KlDiv {
        p: usize,
        q: usize,
    },
    AttnScores {
        q: usize,
        k: usize,
        heads: usize,
        groups: usize,
    },
    AttnMix {
        p: usize,
        v: usize,
    },
    HeadMean(usize),
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub name: Option<String>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

/// Tape of operations for one forward pass.
///
/// Nodes are appended in creation order, so every node's inputs precede it and
/// reverse index order is a valid topological order for the backward sweep.
pub struct Graph<T> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                leaf_grads: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node. With `requires_grad` it receives a gradient on backward.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            name: None,
        })
    }

    /// Named learnable leaf.
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: true,
            name: Some(name.to_string()),
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let requires_grad = {
            let inner = self.inner.borrow();
            inputs.iter().any(|&i| inner.nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Constant };
        self.push_node(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            name: None,
        })
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var {
            graph: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse sweep from a scalar loss. Callable once per graph.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        self.check_owner(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::StaleGraph);
        }
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            ));
        }
        inner.consumed = true;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if inner.nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            match node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        let shape = node.value.shape().to_vec();
                        leaf_grads[id] = Some(Tensor::new(shape, grad)?);
                    }
                }
                Op::Constant => {}
                _ => {
                    for (input, contrib) in ops::vjp(&inner.nodes, id, &grad) {
                        if !inner.nodes[input].requires_grad {
                            continue;
                        }
                        match &mut grads[input] {
                            Some(acc) => {
                                for (a, c) in acc.iter_mut().zip(contrib) {
                                    *a += c;
                                }
                            }
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
        }

        for (id, node) in inner.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[id].is_none() {
                leaf_grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        inner.leaf_grads = leaf_grads;
        Ok(())
    }

    /// Gradient of a `requires_grad` leaf after backward; `None` otherwise.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        inner.leaf_grads.get(var.id).and_then(|g| g.clone())
    }

    /// Label of the first node whose value contains a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        let inner = self.inner.borrow();
        inner.nodes.iter().enumerate().find_map(|(id, node)| {
            if node.value.all_finite() {
                None
            } else {
                Some(match &node.name {
                    Some(name) => format!("parameter `{name}` (node {id})"),
                    None => format!("{} output (node {id})", op_label(&node.op)),
                })
            }
        })
    }

    fn check_owner(&self, var: Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self, var.graph) {
            Ok(())
        } else {
            Err(Error::Contract("variable belongs to another graph".into()))
        }
    }
}

fn op_label<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) | Op::AddRow(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) | Op::MulRow(..) => "mul",
        Op::Scale(..) | Op::ScaleBy(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Gelu(..) => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::ConcatCols(..) | Op::ConcatRows(..) => "concat",
        Op::GatherRows { .. } => "embedding_lookup",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlDiv { .. } => "kl_divergence",
        Op::AttnScores { .. } => "attention_scores",
        Op::AttnMix { .. } => "attention_mix",
        Op::HeadMean(..) => "head_mean",
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Snapshot of the node value.
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Same value, cut off from the tape.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_stale() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = x.mul(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::StaleGraph)));
    }

    #[test]
    fn quadratic_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = x.mul(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero_and_constant_gets_none() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let unused = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let c = g.constant(Tensor::scalar(5.0));
        let y = x.mul(c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x0 = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let g1 = Graph::<f64>::new();
        let x = g1.leaf(x0.clone(), true);
        let f = x.gelu().unwrap().mul(x).unwrap();
        let y = f.add(f).unwrap().sum().unwrap();
        g1.backward(y).unwrap();

        let g2 = Graph::<f64>::new();
        let x2 = g2.leaf(x0, true);
        let f2 = x2.gelu().unwrap().mul(x2).unwrap();
        let y2 = f2.scale(2.0).sum().unwrap();
        g2.backward(y2).unwrap();

        let a = g1.grad(x).unwrap();
        let b = g2.grad(x2).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn first_non_finite_names_the_node() {
        let g = Graph::<f64>::new();
        let x = g.param("w", Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap());
        let _ = x.scale(2.0);
        assert!(g.first_non_finite().unwrap().contains("`w`"));
    }
}
