//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends one node to its [`Tape`]. Nodes only
//! reference earlier nodes, so the tape is always in topological order and a
//! backward pass is a single reverse sweep over it.
//!
//! ```
//! use dbvae::tape::Tape;
//! use dbvae::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::vector(vec![1.0, -2.0]).with_grad());
//! let y = x.square().unwrap().sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0]);
//! ```
//!
//! [`Var::stop_gradient`] passes its operand through unchanged in the
//! forward direction and cuts the edge in the backward direction.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    AddBias { x: NodeId, bias: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MulConst { x: NodeId, c: Vec<f64> },
    MulRows { x: NodeId, w: Vec<f64> },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat { parts: Vec<NodeId> },
    Slice { x: NodeId, start: usize },
    GatherRows { table: NodeId, ids: Vec<Option<usize>> },
    StopGradient,
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when nothing reached it.
    pub fn get_or_zero(&self, v: Var<'_>) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.numel()],
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// `c (m×n) = a (m×k) · b`, where `b` is `k×n`, or `n×k` read transposed.
/// Accumulates into `c` when `beta == 1`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every stride combination passed in addresses only elements of
    // the given slices; the slice lengths are checked by the callers' shape
    // validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable constant.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from the scalar `root`.
    ///
    /// Only nodes recorded before `root` are visited, each exactly once.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::shape("backward (root must be scalar)", &root_node.shape, &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        if root_node.requires_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Leaves that do not require gradients never receive one.
        for (id, slot) in grads.iter_mut().enumerate() {
            if !nodes[id].requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |i: NodeId| nodes[i].requires_grad;
    let len = |i: NodeId| nodes[i].value.len();
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = rows_cols(&nodes[*a].shape);
            let n = node.shape[1];
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if wants(*a) {
                // dA (m×k) += G (m×n) · B'ᵀ, where B' is the right operand as used
                // in the forward product.
                let b_strides = if *trans_b {
                    (k as isize, 1)
                } else {
                    (1, n as isize)
                };
                accumulate(&mut grads[*a], m * k, |ga| {
                    gemm(m, n, k, g, (n as isize, 1), bv, b_strides, 1.0, ga)
                });
            }
            if wants(*b) {
                if *trans_b {
                    // dB (n×k) += Gᵀ (n×m) · A (m×k)
                    accumulate(&mut grads[*b], n * k, |gb| {
                        gemm(n, m, k, g, (1, n as isize), av, (k as isize, 1), 1.0, gb)
                    });
                } else {
                    // dB (k×n) += Aᵀ (k×m) · G (m×n)
                    accumulate(&mut grads[*b], k * n, |gb| {
                        gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), 1.0, gb)
                    });
                }
            }
        }
        Op::AddBias { x, bias } => {
            if wants(*x) {
                accumulate(&mut grads[*x], g.len(), |gx| add_into(gx, g));
            }
            if wants(*bias) {
                let n = len(*bias);
                accumulate(&mut grads[*bias], n, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
        }
        Op::Add(a, b) => {
            for &i in [a, b] {
                if wants(i) {
                    accumulate(&mut grads[i], g.len(), |gi| add_into(gi, g));
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.len(), |ga| add_into(ga, g));
            }
            if wants(*b) {
                accumulate(&mut grads[*b], g.len(), |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
                });
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if wants(*a) {
                accumulate(&mut grads[*a], g.len(), |ga| {
                    for ((d, s), o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                });
            }
            if wants(*b) {
                accumulate(&mut grads[*b], g.len(), |gb| {
                    for ((d, s), o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                });
            }
        }
        Op::Scale(x, c) => {
            accumulate(&mut grads[*x], g.len(), |gx| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)
            });
        }
        Op::AddScalar(x) => {
            accumulate(&mut grads[*x], g.len(), |gx| add_into(gx, g));
        }
        Op::MulConst { x, c } => {
            accumulate(&mut grads[*x], g.len(), |gx| {
                for ((d, s), k) in gx.iter_mut().zip(g).zip(c) {
                    *d += s * k;
                }
            });
        }
        Op::MulRows { x, w } => {
            let cols = node.shape.last().copied().unwrap_or(1);
            accumulate(&mut grads[*x], g.len(), |gx| {
                for ((drow, srow), wi) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(w) {
                    drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s * wi);
                }
            });
        }
        Op::Sigmoid(x) => unary_from_output(grads, *x, g, &node.value, |y| y * (1.0 - y)),
        Op::Tanh(x) => unary_from_output(grads, *x, g, &node.value, |y| 1.0 - y * y),
        Op::Exp(x) => unary_from_output(grads, *x, g, &node.value, |y| y),
        Op::Sqrt(x) => unary_from_output(grads, *x, g, &node.value, |y| 0.5 / y),
        Op::Log(x) => unary_from_output(grads, *x, g, &nodes[*x].value, |v| 1.0 / v),
        Op::Square(x) => unary_from_output(grads, *x, g, &nodes[*x].value, |v| 2.0 * v),
        Op::Sum(x) => {
            let s = g[0];
            accumulate(&mut grads[*x], len(*x), |gx| gx.iter_mut().for_each(|d| *d += s));
        }
        Op::Mean(x) => {
            let n = len(*x);
            let s = g[0] / n as f64;
            accumulate(&mut grads[*x], n, |gx| gx.iter_mut().for_each(|d| *d += s));
        }
        Op::Concat { parts } => {
            let total = node.shape.last().copied().unwrap_or(1);
            let mut offset = 0;
            for &p in parts {
                let (rows, w) = rows_cols(&nodes[p].shape);
                if wants(p) {
                    accumulate(&mut grads[p], rows * w, |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            add_into(&mut gp[r * w..(r + 1) * w], src);
                        }
                    });
                }
                offset += w;
            }
        }
        Op::Slice { x, start } => {
            let (rows, src_cols) = rows_cols(&nodes[*x].shape);
            let w = node.shape.last().copied().unwrap_or(1);
            accumulate(&mut grads[*x], rows * src_cols, |gx| {
                for r in 0..rows {
                    let dst = &mut gx[r * src_cols + start..r * src_cols + start + w];
                    add_into(dst, &g[r * w..(r + 1) * w]);
                }
            });
        }
        Op::GatherRows { table, ids } => {
            let (_, d) = rows_cols(&nodes[*table].shape);
            accumulate(&mut grads[*table], len(*table), |gt| {
                for (r, id) in ids.iter().enumerate() {
                    if let Some(id) = id {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            });
        }
        Op::SoftmaxXent {
            logits,
            targets,
            weights,
            probs,
        } => {
            let (rows, v) = rows_cols(&nodes[*logits].shape);
            let s = g[0];
            accumulate(&mut grads[*logits], rows * v, |gl| {
                for r in 0..rows {
                    let w = weights[r] * s;
                    if w == 0.0 {
                        continue;
                    }
                    let p = &probs[r * v..(r + 1) * v];
                    let dst = &mut gl[r * v..(r + 1) * v];
                    for (j, (d, pj)) in dst.iter_mut().zip(p).enumerate() {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        *d += w * (pj - onehot);
                    }
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn unary_from_output(
    grads: &mut [Option<Vec<f64>>],
    x: NodeId,
    g: &[f64],
    basis: &[f64],
    deriv: impl Fn(f64) -> f64,
) {
    accumulate(&mut grads[x], g.len(), |gx| {
        for ((d, s), b) in gx.iter_mut().zip(g).zip(basis) {
            *d += s * deriv(*b);
        }
    });
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the forward value out.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the forward value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v[0])
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes cannot be combined"
        );
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(Error::shape(name, &a.shape, &b.shape));
            }
            let value = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), value)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Matrix product of `self (m×n)` and `other (n×p)`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self (m×n) · otherᵀ` where `other` is `p×n`.
    pub fn matmul_bt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let (m, k) = (a.shape[0], a.shape[1]);
            let (kb, n, strides) = if trans_b {
                (b.shape[1], b.shape[0], (1, b.shape[1] as isize))
            } else {
                (b.shape[0], b.shape[1], (b.shape[1] as isize, 1))
            };
            if k != kb {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &a.value, (k as isize, 1), &b.value, strides, 0.0, &mut out);
            (vec![m, n], out)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        ))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let cols = x.shape.last().copied().unwrap_or(1);
            if b.value.len() != cols || x.shape.is_empty() {
                return Err(Error::shape("add_bias", &x.shape, &b.shape));
            }
            let mut out = x.value.clone();
            for row in out.chunks_mut(cols) {
                add_into(row, &b.value);
            }
            (x.shape.clone(), out)
        };
        let rg = self.tape.requires(&[self.id, bias.id]);
        Ok(self.tape.push(shape, value, Op::AddBias { x: self.id, bias: bias.id }, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|v| v * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|v| v + c, Op::AddScalar(self.id))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape != c.shape() {
                return Err(Error::shape("mul_const", &x.shape, c.shape()));
            }
            let v = x.value.iter().zip(c.data()).map(|(a, b)| a * b).collect();
            (x.shape.clone(), v)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            Op::MulConst {
                x: self.id,
                c: c.data().to_vec(),
            },
            rg,
        ))
    }

    /// Scales row `i` by the constant `w[i]`.
    pub fn mul_rows(&self, w: &[f64]) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (rows, cols) = rows_cols(&x.shape);
            if rows != w.len() || x.shape.len() < 2 {
                return Err(Error::shape("mul_rows", &x.shape, &[w.len()]));
            }
            let mut out = x.value.clone();
            for (row, wi) in out.chunks_mut(cols).zip(w) {
                row.iter_mut().for_each(|v| *v *= wi);
            }
            (x.shape.clone(), out)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            Op::MulRows {
                x: self.id,
                w: w.to_vec(),
            },
            rg,
        ))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    /// Natural log; fails on any non-positive entry.
    pub fn log(&self) -> Result<Var<'t>> {
        self.check_domain("log", |v| v > 0.0)?;
        Ok(self.unary(f64::ln, Op::Log(self.id)))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        Ok(self.unary(|v| v * v, Op::Square(self.id)))
    }

    /// Square root; fails on any non-positive entry (the derivative is
    /// unbounded at zero).
    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.check_domain("sqrt", |v| v > 0.0)?;
        Ok(self.unary(f64::sqrt, Op::Sqrt(self.id)))
    }

    fn check_domain(&self, op: &'static str, ok: impl Fn(f64) -> bool) -> Result<()> {
        self.with_value(|vals| match vals.iter().position(|&v| !ok(v)) {
            Some(i) => Err(Error::Domain {
                op,
                detail: format!("entry {i} = {}", vals[i]),
            }),
            None => Ok(()),
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.with_value(|v| v.iter().sum::<f64>());
        let rg = self.requires_grad();
        self.tape.push(vec![], vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let s = self.with_value(|v| v.iter().sum::<f64>() / v.len() as f64);
        let rg = self.requires_grad();
        self.tape.push(vec![], vec![s], Op::Mean(self.id), rg)
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&self) -> Var<'t> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        self.tape.push(shape, value, Op::StopGradient, false)
    }

    /// Columns `start..end` of a 2-D variable.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (rows, cols) = rows_cols(&x.shape);
            if x.shape.len() != 2 || start >= end || end > cols {
                return Err(Error::shape("slice_cols", &x.shape, &[start, end]));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(rows * w);
            for r in 0..rows {
                out.extend_from_slice(&x.value[r * cols + start..r * cols + end]);
            }
            (vec![rows, w], out)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, value, Op::Slice { x: self.id, start }, rg))
    }

    /// Gathers rows of a 2-D table; `None` yields a zero row that receives
    /// no gradient.
    pub fn gather_rows(&self, ids: &[Option<usize>]) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id];
            if t.shape.len() != 2 {
                return Err(Error::shape("gather_rows", &t.shape, &[ids.len()]));
            }
            let (rows, d) = (t.shape[0], t.shape[1]);
            let mut out = vec![0.0; ids.len() * d];
            for (pos, id) in ids.iter().enumerate() {
                if let Some(id) = *id {
                    if id >= rows {
                        return Err(Error::Index {
                            index: id,
                            bound: rows,
                            position: format!("gather row {pos}"),
                        });
                    }
                    out[pos * d..(pos + 1) * d].copy_from_slice(&t.value[id * d..(id + 1) * d]);
                }
            }
            (vec![ids.len(), d], out)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Σ_r weights[r] · (−log softmax(self[r])[targets[r]]) as a scalar.
    ///
    /// Rows with zero weight contribute exactly nothing, in value or
    /// gradient.
    pub fn softmax_xent(&self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let (value, probs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (rows, v) = rows_cols(&x.shape);
            if x.shape.len() != 2 || targets.len() != rows || weights.len() != rows {
                return Err(Error::shape("softmax_xent", &x.shape, &[targets.len(), weights.len()]));
            }
            let mut probs = vec![0.0; rows * v];
            let mut total = 0.0;
            for r in 0..rows {
                if targets[r] >= v {
                    return Err(Error::Index {
                        index: targets[r],
                        bound: v,
                        position: format!("target row {r}"),
                    });
                }
                let logits = &x.value[r * v..(r + 1) * v];
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let p = &mut probs[r * v..(r + 1) * v];
                let mut z = 0.0;
                for (pj, &l) in p.iter_mut().zip(logits) {
                    *pj = (l - max).exp();
                    z += *pj;
                }
                p.iter_mut().for_each(|pj| *pj /= z);
                if weights[r] != 0.0 {
                    let nll = z.ln() - (logits[targets[r]] - max);
                    total += weights[r] * nll;
                }
            }
            (total, probs)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![],
            vec![value],
            Op::SoftmaxXent {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }
}

/// Concatenates 2-D variables with equal row counts along columns.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("concat of zero parts".into()))?;
    let tape = first.tape;
    let (shape, value) = {
        let nodes = tape.nodes.borrow();
        let rows = nodes[first.id].shape.first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_tape(p);
            let s = &nodes[p.id].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", &nodes[first.id].shape, s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&nodes[p.id].value[r * w..(r + 1) * w]);
            }
        }
        (vec![rows, total], out)
    };
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires(&ids);
    Ok(tape.push(shape, value, Op::Concat { parts: ids }, rg))
}

/// Sums a non-empty list of same-shape variables.
pub fn sum_all<'t>(vars: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::Argument("sum of zero terms".into()))?;
    rest.iter().try_fold(*first, |acc, v| acc.add(*v))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let i = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        assert_eq!(i.matmul(b).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn projection_matmul() {
        let tape = Tape::new();
        let p = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let b = tape.constant(mat(&[vec![5.0], vec![7.0]]));
        let out = p.matmul(b).unwrap();
        assert_eq!(out.shape(), vec![2, 1]);
        assert_eq!(out.to_vec(), vec![5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let tape = Tape::new();
        let a = tape.constant(mat(&[vec![1.0, 2.0, 3.0]]));
        let b = tape.constant(mat(&[vec![1.0, 0.0, 1.0], vec![0.0, 2.0, 0.0]]));
        assert_eq!(a.matmul_bt(b).unwrap().to_vec(), vec![4.0, 4.0]);
    }

    #[test]
    fn stop_gradient_forward_and_backward() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.5, -2.0]).with_grad());
        let y = x.stop_gradient();
        assert_eq!(y.to_vec(), vec![1.5, -2.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.get_or_zero(x), vec![0.0, 0.0]);
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0]));
        assert_eq!(z.sigmoid().item(), 0.5);
        assert_eq!(z.tanh().item(), 0.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(z.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf(&Tensor::vector(vec![3.0, 4.0]).with_grad());
        let y = a.mul(b).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros(vec![1, 4]));
        let loss = l.softmax_xent(&[2], &[1.0]).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logit_loss_vanishes() {
        let tape = Tape::new();
        let l = tape.constant(mat(&[vec![50.0, 0.0, 0.0]]));
        let loss = l.softmax_xent(&[0], &[1.0]).unwrap();
        assert!(loss.item() < 1e-20);
    }

    #[test]
    fn xent_is_finite_for_huge_logits() {
        let tape = Tape::new();
        let l = tape.constant(mat(&[vec![1e4, -1e4, 3.0]]));
        let loss = l.softmax_xent(&[1], &[1.0]).unwrap();
        assert!(loss.item().is_finite());
        assert!((loss.item() - 2e4).abs() < 1e-9);
    }

    #[test]
    fn xent_gradient_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let l = tape.leaf(&mat(&[vec![1.0, 2.0, 0.5]]).with_grad());
        let loss = l.softmax_xent(&[1], &[1.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 0.5].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let expect = [e[0] / z, e[1] / z - 1.0, e[2] / z];
        for (a, b) in g.get(l).unwrap().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_rows_contribute_nothing() {
        let tape = Tape::new();
        let l = tape.leaf(&mat(&[vec![1.0, 2.0], vec![3.0, -1.0]]).with_grad());
        let loss = l.softmax_xent(&[0, 1], &[1.0, 0.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(&g.get(l).unwrap()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn repeated_gather_accumulates() {
        let tape = Tape::new();
        let t = tape.leaf(&mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]).with_grad());
        let rows = t.gather_rows(&[Some(1), Some(1)]).unwrap();
        let g = tape.backward(rows.sum()).unwrap();
        assert_eq!(g.get(t).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_out_of_range_names_position() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = t.gather_rows(&[Some(0), Some(5)]).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn gradient_accumulation_is_linear() {
        let data = Tensor::vector(vec![0.3, -1.2, 0.7]).with_grad();
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let x = tape.leaf(&data);
            let a = x.tanh().sum();
            let b = x.exp().sum();
            let root = match which {
                0 => a,
                1 => b,
                _ => a.add(b).unwrap(),
            };
            tape.backward(root).unwrap().get_or_zero(x)
        };
        let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..3 {
            assert!((ga[i] + gb[i] - gab[i]).abs() < 1e-14);
        }
    }
}
