use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use super::{gemm, CsrMatrix, Tensor};
use crate::error::{GrinError, Result};

#[derive(Clone, Copy, Debug)]
enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    Affine { input: usize, scale: f64 },
    Pointwise(Pointwise, usize),
    ConcatLast(Vec<usize>),
    SpMM { adj: Arc<CsrMatrix>, input: usize },
    Sum(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in topological order.
///
/// The tape is single-owner: handles borrow it, and every recorded node only
/// refers to nodes pushed before it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// A trainable leaf: it receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is ever accumulated for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Concatenates along the last axis. Empty operands are allowed.
    pub fn concat_last<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| GrinError::Contract("concat of zero tensors".into()))?;
        let lead = first.shape();
        let lead = &lead[..lead.len() - 1];
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(GrinError::dim("concat_last", first.shape().as_slice(), s));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let req = parts.iter().any(|p| self.requires(p.id));
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatLast(ids), req))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are summed at fan-out points. Nodes that do not depend on a
    /// parameter are skipped.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(GrinError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let acc = |grads: &mut Vec<Option<Vec<f64>>>, target: usize| -> Option<usize> {
                if !nodes[target].requires_grad {
                    return None;
                }
                grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
                Some(target)
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if let Some(a) = acc(&mut grads, *a) {
                        let da = grads[a].as_mut().unwrap();
                        gemm(m, n, k, &g, false, bv.data(), true, da, 1.0);
                    }
                    if let Some(b) = acc(&mut grads, *b) {
                        let db = grads[b].as_mut().unwrap();
                        gemm(k, m, n, av.data(), true, &g, false, db, 1.0);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    for (target, other, negate) in [(*a, bv, false), (*b, av, *kind == Binary::Sub)] {
                        if !nodes[target].requires_grad {
                            continue;
                        }
                        let contrib: Vec<f64> = match kind {
                            Binary::Add | Binary::Sub if negate => g.iter().map(|v| -v).collect(),
                            Binary::Add | Binary::Sub => g.clone(),
                            Binary::Mul => {
                                let od = other.data();
                                if od.len() == g.len() {
                                    g.iter().zip(od).map(|(x, y)| x * y).collect()
                                } else {
                                    let mut c = Vec::with_capacity(g.len());
                                    for chunk in g.chunks(od.len()) {
                                        c.extend(chunk.iter().zip(od).map(|(x, y)| x * y));
                                    }
                                    c
                                }
                            }
                        };
                        accumulate(&mut grads, target, nodes[target].value.len(), contrib);
                    }
                }
                Op::Affine { input, scale } => {
                    if nodes[*input].requires_grad {
                        let contrib = g.iter().map(|v| scale * v).collect();
                        accumulate(&mut grads, *input, g.len(), contrib);
                    }
                }
                Op::Pointwise(kind, input) => {
                    if nodes[*input].requires_grad {
                        let out = node.value.data();
                        let inp = nodes[*input].value.data();
                        let contrib: Vec<f64> = match kind {
                            Pointwise::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
                            Pointwise::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                            Pointwise::Relu => g
                                .iter()
                                .zip(inp)
                                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                                .collect(),
                            Pointwise::Abs => g
                                .iter()
                                .zip(inp)
                                .map(|(g, x)| {
                                    if *x > 0.0 {
                                        *g
                                    } else if *x < 0.0 {
                                        -g
                                    } else {
                                        0.0
                                    }
                                })
                                .collect(),
                        };
                        accumulate(&mut grads, *input, g.len(), contrib);
                    }
                }
                Op::ConcatLast(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|&p| nodes[p].value.cols()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = if total == 0 { 0 } else { g.len() / total };
                    let mut off = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        if let Some(pi) = acc(&mut grads, p) {
                            let dp = grads[pi].as_mut().unwrap();
                            for r in 0..rows {
                                let src = &g[r * total + off..r * total + off + w];
                                for (d, s) in dp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SpMM { adj, input } => {
                    if let Some(x) = acc(&mut grads, *input) {
                        let cols = nodes[x].value.cols();
                        let dx = grads[x].as_mut().unwrap();
                        adj.mul_dense_transposed_acc(&g, cols, dx);
                    }
                }
                Op::Sum(input) => {
                    if let Some(x) = acc(&mut grads, *input) {
                        for d in grads[x].as_mut().unwrap().iter_mut() {
                            *d += g[0];
                        }
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adds `contrib` into the gradient slot of `target` (length `len`), taking
/// ownership when the slot is empty. A longer `contrib` is folded onto the
/// broadcast operand by summing over its repeats.
fn accumulate(grads: &mut [Option<Vec<f64>>], target: usize, len: usize, contrib: Vec<f64>) {
    match &mut grads[target] {
        slot @ None if contrib.len() == len => *slot = Some(contrib),
        slot => {
            let dst = slot.get_or_insert_with(|| vec![0.0; len]);
            for chunk in contrib.chunks(len) {
                for (d, c) in dst.iter_mut().zip(chunk) {
                    *d += c;
                }
            }
        }
    }
}

fn broadcast_len(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(a.len());
    }
    let trim = |s: &[usize]| -> Vec<usize> {
        let lead = s.iter().take_while(|&&d| d == 1).count();
        s[lead.min(s.len().saturating_sub(1))..].to_vec()
    };
    let (ta, tb) = (trim(sa), trim(sb));
    let (big, small) = if a.len() >= b.len() { (sa, &tb) } else { (sb, &ta) };
    let suffix_ok = big.len() >= small.len() && big[big.len() - small.len()..] == small[..];
    if small.iter().product::<usize>() == 1 || suffix_ok {
        Ok(a.len().max(b.len()))
    } else {
        Err(GrinError::dim(op, sa, sb))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul(&b)?;
        let req = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(out, Op::MatMul(self.id, rhs.id), req))
    }

    fn binary(self, kind: Binary, rhs: Var<'t>, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let len = broadcast_len(name, &a, &b)?;
        let (la, lb) = (a.len(), b.len());
        let (ad, bd) = (a.data(), b.data());
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let mut data = Vec::with_capacity(len);
        if la == lb {
            data.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        } else if la > lb {
            // the smaller operand repeats along the leading axes
            for chunk in ad.chunks(lb) {
                data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for chunk in bd.chunks(la) {
                data.extend(ad.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        let shape = if la >= lb { a.shape() } else { b.shape() };
        let req = self.requires_grad() || rhs.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(shape, data)?, Op::Binary(kind, self.id, rhs.id), req))
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, rhs, "add")
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, rhs, "sub")
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, rhs, "mul")
    }

    /// `scale * x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let out = self.value().map(|v| scale * v + shift);
        let req = self.requires_grad();
        self.tape.push(
            out,
            Op::Affine {
                input: self.id,
                scale,
            },
            req,
        )
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    fn pointwise(self, kind: Pointwise) -> Var<'t> {
        let f: fn(f64) -> f64 = match kind {
            Pointwise::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
            Pointwise::Tanh => f64::tanh,
            Pointwise::Relu => |v| v.max(0.0),
            Pointwise::Abs => f64::abs,
        };
        let out = self.value().map(f);
        let req = self.requires_grad();
        self.tape.push(out, Op::Pointwise(kind, self.id), req)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.pointwise(Pointwise::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.pointwise(Pointwise::Tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.pointwise(Pointwise::Relu)
    }

    pub fn abs(self) -> Var<'t> {
        self.pointwise(Pointwise::Abs)
    }

    /// Left-multiplies by a constant sparse matrix: `y[i] = Σ_j adj[i,j]·x[j]`.
    pub fn spmm(self, adj: &Arc<CsrMatrix>) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 || adj.n_cols() != x.shape()[0] {
            return Err(GrinError::dim(
                "sparse_dense_matmul",
                &[adj.n_rows(), adj.n_cols()],
                x.shape(),
            ));
        }
        let cols = x.cols();
        let data = adj.mul_dense(x.data(), cols);
        let req = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new([adj.n_rows(), cols], data)?,
            Op::SpMM {
                adj: Arc::clone(adj),
                input: self.id,
            },
            req,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().sum();
        let req = self.requires_grad();
        self.tape
            .push(Tensor::scalar(total), Op::Sum(self.id), req)
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, if any path from the loss reached it.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient for `v`, zero when unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}
