//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every value produced during a forward
//! pass lives in the graph and is addressed by a [`Var`] handle; the append
//! order is a topological order, so [`Graph::backward`] is a single reverse
//! sweep. Graphs are rebuilt for every forward pass.
//!
//! ```
//! use pccforge::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().requires_grad());
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
//! ```

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod ops;

pub use kernels::gemm;
#[cfg(test)]
pub(crate) use ops::softplus;

use crate::error::{Error, Result};

/// A row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer. Ignored for untracked tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Value-equal copy with no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Neg(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    MaxAxis {
        a: Var,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
        inner: usize,
    },
    Narrow {
        a: Var,
        outer: usize,
        len: usize,
        start: usize,
        width: usize,
        inner: usize,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
        width: usize,
    },
    RowNorms {
        a: Var,
        width: usize,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f64>,
    },
    CausalConv {
        x: Var,
        w: Var,
        bias: Var,
        steps: usize,
        channels: usize,
        width: usize,
    },
    Scan(Box<ops::ScanSaved>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    // Only leaves keep a gradient between backward calls.
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Records a tensor as a leaf. Tracked tensors receive gradients on
    /// [`Graph::backward`]; any gradient already on `t` is discarded.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push_raw(t.shape, t.data, Op::Leaf, requires_grad)
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Value-equal leaf with no history and no gradient tracking.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, data) = (node.shape.clone(), node.data.clone());
        self.push_raw(shape, data, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Snapshot of a node as a standalone tensor, gradient included.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            requires_grad: node.requires_grad,
            grad: node.grad.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push_raw(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op node; the op is dropped (the node becomes a constant)
    /// when none of `inputs` is tracked.
    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if tracked { op } else { Op::Leaf };
        self.push_raw(shape, data, op, tracked)
    }

    /// Propagates d(loss)/d(node) to every tracked leaf reachable from
    /// `loss`, adding into the leaves' existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.requires_grad {
            return Err(Error::InvalidArgument(
                "loss does not depend on any tracked tensor".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(go) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&go).for_each(|(g, d)| *g += d),
                    None => node.grad = Some(go),
                }
                continue;
            }
            self.backward_node(id, &go, &mut grads);
        }
        Ok(())
    }

    /// Adds `delta` into the pending gradient of `v` when `v` is tracked.
    fn send(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
        f(slot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn untracked_tensor_never_accumulates() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert!(t.grad().is_none());
        let mut t = t.requires_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![2], vec![1.0, 2.0])
                .unwrap()
                .requires_grad(),
        );
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5])
                .unwrap()
                .requires_grad(),
        );
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn shared_subexpression_sums_contributions() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).requires_grad());
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let w = g.leaf(
            Tensor::new(vec![2], vec![1.0, 2.0])
                .unwrap()
                .requires_grad(),
        );
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![3], vec![1.0, 2.0, 3.0])
                .unwrap()
                .requires_grad(),
        );
        let e = g.exp(x);
        let d = g.detach(e);
        assert_eq!(g.value(d), g.value(e));
        assert!(!g.requires_grad(d));
        let w = g.leaf(Tensor::new(vec![3], vec![1.0; 3]).unwrap().requires_grad());
        let y = g.mul(d, w).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), g.value(e));
    }

    #[test]
    fn ops_on_constants_are_not_recorded() {
        let mut g = Graph::new();
        let c = g.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let e = g.exp(c);
        assert!(!g.requires_grad(e));
        let s = g.sum(e);
        assert!(g.backward(s).is_err());
    }
}
