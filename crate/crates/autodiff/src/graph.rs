use crate::ops;
use crate::{Real, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op record: input handles plus whatever backward needs beyond the node values.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: Real },
    Relu { a: Var },
    Sigmoid { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, indices: Vec<usize> },
    ExpandLeading { a: Var },
    MatMul { a: Var, b: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, axis: usize, rstd: Vec<Real> },
    Conv2d(ops::conv::ConvRecord),
    UpsampleNearest { a: Var, factor: usize },
    SigmoidBce { logits: Var, targets: Tensor },
    Dice { logits: Var, targets: Tensor, eps: Real },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only tape. Nodes are topologically ordered by insertion.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
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

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad matches value shape"))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Backward from a single-element root, seeded with 1.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let shape = self.shape(root).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: shape,
                rhs: vec![1],
            });
        }
        self.backward_with(root, Tensor::full(&shape, 1.0))
    }

    /// Backward from `root` with an explicit upstream gradient.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) -> Result<(), TensorError> {
        if seed.shape() != self.shape(root) {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: seed.shape().to_vec(),
                rhs: self.shape(root).to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut self.grads,
                };
                backprop(&self.nodes[i], &g, &mut sink);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Accumulation target for input gradients during backward.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<Real>>],
}

impl<'a> GradSink<'a> {
    /// Mutable gradient buffer for `v`, zero-initialised on first touch.
    /// `None` when `v` does not require a gradient.
    pub(crate) fn buf(&mut self, v: Var) -> Option<&mut [Real]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }
}

fn backprop(node: &Node, g: &[Real], sink: &mut GradSink<'_>) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => ops::arith::add_backward(*a, *b, g, sink),
        Op::Mul { a, b } => ops::arith::mul_backward(*a, *b, g, sink),
        Op::Scale { a, factor } => ops::arith::scale_backward(*a, *factor, g, sink),
        Op::Relu { a } => ops::arith::relu_backward(*a, out, g, sink),
        Op::Sigmoid { a } => ops::arith::sigmoid_backward(*a, out, g, sink),
        Op::SumAll { a } => ops::arith::sum_backward(*a, 1.0, g, sink),
        Op::MeanAll { a } => {
            let n = sink.value(*a).numel() as Real;
            ops::arith::sum_backward(*a, 1.0 / n, g, sink)
        }
        Op::Reshape { a } => ops::shape::reshape_backward(*a, g, sink),
        Op::Permute { a, perm } => ops::shape::permute_backward(*a, perm, out, g, sink),
        Op::Concat { inputs, axis } => ops::shape::concat_backward(inputs, *axis, out, g, sink),
        Op::Narrow { a, axis, start } => ops::shape::narrow_backward(*a, *axis, *start, out, g, sink),
        Op::IndexSelect { a, indices } => ops::shape::index_select_backward(*a, indices, g, sink),
        Op::ExpandLeading { a } => ops::shape::expand_leading_backward(*a, g, sink),
        Op::MatMul { a, b } => ops::linalg::matmul_backward(*a, *b, out, g, sink),
        Op::Softmax { a, axis } => ops::norm::softmax_backward(*a, *axis, out, g, sink),
        Op::LayerNorm { a, axis, rstd } => ops::norm::layer_norm_backward(*a, *axis, rstd, out, g, sink),
        Op::Conv2d(rec) => ops::conv::conv2d_backward(rec, out, g, sink),
        Op::UpsampleNearest { a, factor } => ops::conv::upsample_backward(*a, *factor, out, g, sink),
        Op::SigmoidBce { logits, targets } => ops::loss::sigmoid_bce_backward(*logits, targets, g, sink),
        Op::Dice { logits, targets, eps } => ops::loss::dice_backward(*logits, targets, *eps, g, sink),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diamond_accumulates_both_paths() {
        // y = x*x + 3x, consumed twice via mul and via scale
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 2.0));
        let x = g.variable(Tensor::full(&[2], 1.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(&[2], 1.0));
        assert!(g.backward(x).is_err());
    }
}
