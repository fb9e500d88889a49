//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Graphs are
//! single-use: each forward pass builds a fresh one and `backward` may be
//! called once.
//!
//! Broadcasting is limited to a single-element tensor combined with an
//! arbitrary tensor. Row-wise bias addition is expressed as
//! `ones(B,1) · bias(1,n)` so every gradient rule stays elementwise or a
//! plain matrix product.

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

static NEXT_GRAPH: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node on a specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: usize,
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Sum(usize),
    Silu(usize),
    Sin(usize),
    Cos(usize),
    Clamp(usize, f64, f64),
    Reshape(usize),
    Gather(usize, Arc<[usize]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    uid: usize,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            uid: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.uid,
            id: nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.uid, "variable belongs to a different graph");
        v.id
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let i = self.idx(v);
        self.nodes.borrow()[i].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        let i = self.idx(v);
        self.nodes.borrow()[i].value.shape().to_vec()
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ia = self.idx(a);
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[ia].value.map(f), nodes[ia].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let data: Vec<f64> = if ta.shape() == tb.shape() {
                ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
            } else if tb.is_scalar() {
                let y = tb.data()[0];
                ta.data().iter().map(|&x| f(x, y)).collect()
            } else if ta.is_scalar() {
                let x = ta.data()[0];
                tb.data().iter().map(|&y| f(x, y)).collect()
            } else {
                return Err(Error::dims(name, ta.shape(), tb.shape()));
            };
            let shape = if ta.shape() == tb.shape() || tb.is_scalar() {
                ta.shape()
            } else {
                tb.shape()
            };
            (
                Tensor::raw(shape, data),
                nodes[ia].requires_grad || nodes[ib].requires_grad,
            )
        };
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Add(self.idx(a), self.idx(b));
        self.elementwise("add", a, b, op, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Sub(self.idx(a), self.idx(b));
        self.elementwise("sub", a, b, op, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Mul(self.idx(a), self.idx(b));
        self.elementwise("mul", a, b, op, |x, y| x * y)
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(self.idx(a), k), |x| k * x)
    }

    /// Smooth sigmoid-weighted linear unit `u·σ(u)`.
    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, Op::Silu(self.idx(a)), |u| u * sigmoid(u))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, Op::Sin(self.idx(a)), f64::sin)
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, Op::Cos(self.idx(a)), f64::cos)
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient passes only where
    /// the input lies inside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(self.idx(a), lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&self, a: Var) -> Var {
        let ia = self.idx(a);
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let s: f64 = nodes[ia].value.data().iter().sum();
            (Tensor::scalar(s), nodes[ia].requires_grad)
        };
        self.push(value, Op::Sum(ia), rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
                (Ok(x), Ok(y)) => (x, y),
                _ => return Err(Error::dims("matmul", ta.shape(), tb.shape())),
            };
            if k != k2 {
                return Err(Error::dims("matmul", ta.shape(), tb.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
            (
                Tensor::raw(&[m, n], out),
                nodes[ia].requires_grad || nodes[ib].requires_grad,
            )
        };
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[ia].value.reshape(shape)?, nodes[ia].requires_grad)
        };
        Ok(self.push(value, Op::Reshape(ia), rg))
    }

    /// `out.flat[m] = a.flat[indices[m]]`, shaped as `shape`. Repeated
    /// indices are allowed; their gradients accumulate.
    pub fn gather(&self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(Error::dims("gather", shape, &[indices.len()]));
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let src = nodes[ia].value.data();
            let mut out = Vec::with_capacity(n);
            for &k in &indices {
                match src.get(k) {
                    Some(&v) => out.push(v),
                    None => {
                        return Err(Error::OutOfRange {
                            index: k,
                            limit: src.len(),
                        })
                    }
                }
            }
            (Tensor::raw(shape, out), nodes[ia].requires_grad)
        };
        Ok(self.push(value, Op::Gather(ia, indices.into()), rg))
    }

    /// Reverse sweep from a single-element root. Consumes the graph: a
    /// second call returns a contract error.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root = self.idx(root);
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward() already ran on this graph".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if !nodes[root].value.is_scalar() {
            self.consumed.set(false);
            return Err(Error::Contract(format!(
                "backward() needs a scalar root, got shape {:?}",
                nodes[root].value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Some(Tensor::raw(n.value.shape(), g)),
                _ => None,
            })
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            graph: self.uid,
            grads,
            shapes,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], target: usize, len: usize, f: impl Fn(&mut [f64])) {
    let slot = grads[target].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Gradient of a broadcast-capable elementwise parent.
fn elementwise_grad(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    parent: usize,
    out_len: usize,
    local: impl Fn(usize) -> f64,
) {
    if !nodes[parent].requires_grad {
        return;
    }
    let plen = nodes[parent].value.len();
    if plen == out_len {
        accumulate(grads, parent, plen, |g| {
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += local(k);
            }
        });
    } else {
        // Scalar parent broadcast over the output.
        let total: f64 = (0..out_len).map(&local).sum();
        accumulate(grads, parent, plen, |g| g[0] += total);
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let n = g.len();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            elementwise_grad(nodes, grads, *a, n, |k| g[k]);
            elementwise_grad(nodes, grads, *b, n, |k| g[k]);
        }
        Op::Sub(a, b) => {
            elementwise_grad(nodes, grads, *a, n, |k| g[k]);
            elementwise_grad(nodes, grads, *b, n, |k| -g[k]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let at = |v: &[f64], k: usize| if v.len() == 1 { v[0] } else { v[k] };
            elementwise_grad(nodes, grads, *a, n, |k| g[k] * at(vb, k));
            elementwise_grad(nodes, grads, *b, n, |k| g[k] * at(va, k));
        }
        Op::Scale(a, s) => {
            elementwise_grad(nodes, grads, *a, n, |k| s * g[k]);
        }
        Op::Sum(a) => {
            let len = nodes[*a].value.len();
            if nodes[*a].requires_grad {
                accumulate(grads, *a, len, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
        }
        Op::Silu(a) => {
            let u = nodes[*a].value.data();
            elementwise_grad(nodes, grads, *a, n, |k| {
                let s = sigmoid(u[k]);
                g[k] * (s + u[k] * s * (1.0 - s))
            });
        }
        Op::Sin(a) => {
            let u = nodes[*a].value.data();
            elementwise_grad(nodes, grads, *a, n, |k| g[k] * u[k].cos());
        }
        Op::Cos(a) => {
            let u = nodes[*a].value.data();
            elementwise_grad(nodes, grads, *a, n, |k| -g[k] * u[k].sin());
        }
        Op::Clamp(a, lo, hi) => {
            let u = nodes[*a].value.data();
            elementwise_grad(nodes, grads, *a, n, |k| {
                if u[k] >= *lo && u[k] <= *hi {
                    g[k]
                } else {
                    0.0
                }
            });
        }
        Op::Reshape(a) => {
            elementwise_grad(nodes, grads, *a, n, |k| g[k]);
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
            let [m, k] = ta.shape()[..] else { unreachable!() };
            let nn = tb.shape()[1];
            if nodes[*a].requires_grad {
                // dA = dC · Bᵀ
                accumulate(grads, *a, m * k, |ga| {
                    gemm(m, nn, k, g, false, tb.data(), true, 1.0, ga)
                });
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · dC
                accumulate(grads, *b, k * nn, |gb| {
                    gemm(k, m, nn, ta.data(), true, g, false, 1.0, gb)
                });
            }
        }
        Op::Gather(a, indices) => {
            let len = nodes[*a].value.len();
            if nodes[*a].requires_grad {
                accumulate(grads, *a, len, |ga| {
                    for (m, &src) in indices.iter().enumerate() {
                        ga[src] += g[m];
                    }
                });
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    graph: usize,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros for constants and nodes the root
    /// does not depend on.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.graph, self.graph, "variable belongs to a different graph");
        match &self.grads[v.id] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}
