//! Dense `f64` tensors recorded on a dynamic computation graph.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation on a
//! [`Tensor`] pushes a node that remembers its parents, so construction order
//! is a valid topological order and reverse-mode differentiation is a single
//! sweep from the output back to node 0.
//!
//! Gradients are themselves built out of tensor operations. With
//! `create_graph = true` (see [`grad`]) the backward sweep is recorded on the
//! same graph, which is what makes gradients of gradients available to the
//! meta-trainer's inner step.
//!
//! Broadcasting is deliberately narrow: binary element-wise operations accept
//! equal shapes, or one operand holding a single element. Anything else must
//! be spelled out with [`Tensor::expand`].

mod backward;
mod linalg;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use backward::grad;
pub use linalg::{sym_eig, Matrix, SymEig};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum { src: usize, axes: Vec<usize> },
    Expand { src: usize, axes: Vec<usize> },
}

struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

struct Inner {
    nodes: Vec<Node>,
    /// When false, new nodes are created detached (used by first-order backward sweeps).
    recording: bool,
}

/// Arena holding one dynamic computation graph.
///
/// Cloning a `Graph` yields another handle to the same arena. A graph is
/// single-threaded; build a fresh one per training step.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                recording: true,
            })),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates a leaf tensor. `data.len()` must equal the product of `shape`.
    pub fn tensor(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(self.push_leaf(data, shape.to_vec(), requires_grad))
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.tensor(data, shape, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.tensor(data, shape, false)
    }

    /// Rank-0 constant.
    pub fn scalar(&self, value: f64) -> Tensor {
        self.push_leaf(vec![value], Vec::new(), false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        self.push_leaf(vec![0.0; numel], shape.to_vec(), false)
    }

    fn push_leaf(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            data: Rc::new(data),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, op: Op, parents: &[usize]) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = inner.recording && parents.iter().any(|&p| inner.nodes[p].requires_grad);
        inner.nodes.push(Node {
            shape,
            data: Rc::new(data),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn set_recording(&self, on: bool) -> bool {
        std::mem::replace(&mut self.inner.borrow_mut().recording, on)
    }

    fn handle(&self, id: usize) -> Tensor {
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one node of a [`Graph`]. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Shared view of the values (row-major).
    pub fn data(&self) -> Rc<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().as_ref().clone()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        let data = self.data();
        assert_eq!(data.len(), 1, "item() on a tensor with {} elements", data.len());
        data[0]
    }

    /// Accumulated gradient from [`Tensor::backward`], if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        self.graph.inner.borrow_mut().nodes[self.id].grad = None;
    }

    /// Same values as a fresh constant leaf, cut off from the graph history.
    pub fn detach(&self) -> Tensor {
        let (data, shape) = self.parts();
        self.graph.push_leaf(data.as_ref().clone(), shape, false)
    }

    fn parts(&self) -> (Rc<Vec<f64>>, Vec<usize>) {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        (node.data.clone(), node.shape.clone())
    }

    fn check_graph(&self, other: &Tensor) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(Error::Contract("tensors belong to different graphs".into()))
        }
    }

    fn binary(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_graph(other)?;
        let (a, sa) = self.parts();
        let (b, sb) = other.parts();
        let (data, shape) = if sa == sb {
            (a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(), sa)
        } else if b.len() == 1 {
            (a.iter().map(|&x| f(x, b[0])).collect(), sa)
        } else if a.len() == 1 {
            (b.iter().map(|&y| f(a[0], y)).collect(), sb)
        } else {
            return Err(Error::Dimension(format!(
                "cannot combine shapes {sa:?} and {sb:?} (only equal shapes or a single-element operand)"
            )));
        };
        Ok(self.graph.push(data, shape, op, &[self.id, other.id]))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let (a, shape) = self.parts();
        let data = a.iter().map(|&x| f(x)).collect();
        self.graph.push(data, shape, op, &[self.id])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div(self.id, other.id), |x, y| x / y)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        let c = self.graph.scalar(c);
        self.add(&c).expect("single-element operand always broadcasts")
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("equal shapes")
    }

    /// `max(x, 0)`. The subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.check_nonnegative("log")?;
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.check_nonnegative("sqrt")?;
        Ok(self.unary(Op::Sqrt(self.id), f64::sqrt))
    }

    fn check_nonnegative(&self, what: &str) -> Result<()> {
        match self.data().iter().find(|x| **x < 0.0) {
            Some(x) => Err(Error::Domain(format!("{what} of negative value {x}"))),
            None => Ok(()),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_graph(other)?;
        let (a, sa) = self.parts();
        let (b, sb) = other.parts();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        Ok(self.graph.push(out, vec![m, n], Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Tensor> {
        let (a, sa) = self.parts();
        if sa.len() != 2 {
            return Err(Error::Dimension(format!("transpose of rank-{} tensor", sa.len())));
        }
        let (m, n) = (sa[0], sa[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        Ok(self.graph.push(out, vec![n, m], Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let (a, sa) = self.parts();
        let numel: usize = shape.iter().product();
        if numel != a.len() {
            return Err(Error::Dimension(format!("cannot reshape {sa:?} into {shape:?}")));
        }
        Ok(self
            .graph
            .push(a.as_ref().clone(), shape.to_vec(), Op::Reshape(self.id), &[self.id]))
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum(&self, axes: &[usize]) -> Result<Tensor> {
        let (a, sa) = self.parts();
        let axes = normalize_axes(axes, sa.len())?;
        let out_shape = drop_axes(&sa, &axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for_each_index(&sa, &axes, &out_shape, |i, o| out[o] += a[i]);
        Ok(self.graph.push(
            out,
            out_shape,
            Op::Sum { src: self.id, axes },
            &[self.id],
        ))
    }

    /// Mean over `axes`; the gradient spreads uniformly over the reduced positions.
    pub fn mean(&self, axes: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let axes = normalize_axes(axes, shape.len())?;
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(Error::Dimension(format!("mean over empty axes of {shape:?}")));
        }
        Ok(self.sum(&axes)?.scale(1.0 / count as f64))
    }

    pub fn sum_all(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes).expect("all axes are valid")
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes)
    }

    /// Broadcasts into `shape` by repeating along `axes`, which are the axes of
    /// `shape` that this tensor lacks. Inverse of [`Tensor::sum`] over the same axes.
    pub fn expand(&self, shape: &[usize], axes: &[usize]) -> Result<Tensor> {
        let (a, sa) = self.parts();
        let axes = normalize_axes(axes, shape.len())?;
        if drop_axes(shape, &axes) != sa {
            return Err(Error::Dimension(format!(
                "cannot expand {sa:?} into {shape:?} along axes {axes:?}"
            )));
        }
        let mut out = vec![0.0; shape.iter().product()];
        for_each_index(shape, &axes, &sa, |i, o| out[i] = a[o]);
        Ok(self.graph.push(
            out,
            shape.to_vec(),
            Op::Expand { src: self.id, axes },
            &[self.id],
        ))
    }

    /// `[d]` to `[n, d]`, each row a copy.
    pub fn repeat_rows(&self, n: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::Dimension(format!("repeat_rows needs a vector, got {s:?}")));
        }
        self.expand(&[n, s[0]], &[0])
    }

    /// `[m]` to `[m, n]`, each column a copy.
    pub fn repeat_cols(&self, n: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::Dimension(format!("repeat_cols needs a vector, got {s:?}")));
        }
        self.expand(&[s[0], n], &[1])
    }

    /// `v / ‖v‖₂` for a vector.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::Dimension(format!("l2_normalize needs a vector, got {s:?}")));
        }
        let norm = self.square().sum_all();
        if norm.item() <= 0.0 {
            return Err(Error::Degenerate("cannot normalize a zero vector".into()));
        }
        self.div(&norm.sqrt()?)
    }

    /// Normalizes every row of a rank-2 tensor to unit l2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("l2_normalize_rows needs a matrix, got {s:?}")));
        }
        let sq = self.square().sum(&[1])?;
        if let Some(row) = sq.data().iter().position(|&v| v <= 0.0) {
            return Err(Error::Degenerate(format!("row {row} is a zero vector")));
        }
        self.div(&sq.sqrt()?.repeat_cols(s[1])?)
    }

    /// Reverse-mode sweep from this scalar. Every reachable node that requires
    /// a gradient has `∂self/∂node` *added* to its stored gradient, so a second
    /// call without [`Tensor::zero_grad`] doubles the stored values.
    pub fn backward(&self) -> Result<()> {
        backward::backward(self)
    }
}

fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut out = axes.to_vec();
    out.sort_unstable();
    out.dedup();
    if out.len() != axes.len() {
        return Err(Error::Dimension(format!("repeated axis in {axes:?}")));
    }
    if let Some(bad) = out.iter().find(|&&a| a >= rank) {
        return Err(Error::Dimension(format!("axis {bad} out of range for rank {rank}")));
    }
    Ok(out)
}

fn drop_axes(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &s)| s)
        .collect()
}

/// Walks every multi-index of `full` in row-major order and hands the flat
/// index together with the flat index into `reduced` (the shape with `axes` dropped).
fn for_each_index(full: &[usize], axes: &[usize], reduced: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = full.iter().product();
    if numel == 0 {
        return;
    }
    let mut reduced_strides = vec![1usize; reduced.len()];
    for k in (0..reduced.len().saturating_sub(1)).rev() {
        reduced_strides[k] = reduced_strides[k + 1] * reduced[k + 1];
    }
    // stride into the reduced tensor for each full axis (0 for dropped axes)
    let mut strides = vec![0usize; full.len()];
    let mut k = 0;
    for (d, s) in strides.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *s = reduced_strides[k];
            k += 1;
        }
    }
    let mut idx = vec![0usize; full.len()];
    let mut o = 0usize;
    for i in 0..numel {
        f(i, o);
        for d in (0..full.len()).rev() {
            idx[d] += 1;
            o += strides[d];
            if idx[d] < full[d] {
                break;
            }
            o -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}
