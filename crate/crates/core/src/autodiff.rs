//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and the ids of its inputs, so node order is already
//! topological; [`Tape::backward`] walks the nodes once in reverse.
//!
//! ```
//! use hgnmn_core::autodiff::Tape;
//! use hgnmn_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let y = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
//! let dot = tape.sum(tape.mul(x, y).unwrap());
//! let grads = tape.backward(dot).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Total mass below which L1 normalization falls back to the uniform vector.
pub const MIN_MASS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    /// `[m,k] · [k]`
    MatVec(Var, Var),
    /// `[k,m]ᵀ · [k]`
    TMatVec(Var, Var),
    /// `[m,k] · [k,n]`
    MatMul(Var, Var),
    /// `[m,k] · [n,k]ᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    BroadcastRows(Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { input: Var, axis: usize },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    NormalizeL1 { input: Var, degenerate: bool },
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    StackRows(Vec<Var>),
    Row(Var, usize),
    Reshape(Var),
    Sum(Var),
    Index(Var, usize),
    ScatterEdges { input: Var, edges: Rc<[(usize, usize)]> },
    Mix { weights: Var, inputs: Vec<Var> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

/// Gradients of one backward pass. Only leaves and parameters keep theirs.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss or is an intermediate node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `None` when the parameter was never placed on the tape or is unreachable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Adds `scale * grad` of every reached parameter into `acc` (one buffer per parameter).
    pub fn accumulate_into(&self, acc: &mut [Tensor], scale: f64) {
        let mut entries: Vec<_> = self.params.iter().collect();
        entries.sort_by_key(|(id, _)| **id);
        for (id, var) in entries {
            if let Some(g) = self.wrt(*var) {
                for (a, b) in acc[id.index()].data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// An input tensor. Gradients are still computed for it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Places a stored parameter on the tape, once per tape.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn matvec(&self, a: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.value(a), self.value(x));
        if av.rank() != 2 || xv.rank() != 1 || av.cols() != xv.len() {
            return Err(Error::shape("matvec", &[av.shape(), xv.shape()]));
        }
        let out = tensor::matmul(av.data(), xv.data(), av.rows(), av.cols(), 1);
        Ok(self.push(Tensor::vector(out), Op::MatVec(a, x)))
    }

    /// `aᵀ · x` for `a` of shape `[k, m]` and `x` of length `k`.
    pub fn tmatvec(&self, a: Var, x: Var) -> Result<Var> {
        let (av, xv) = (self.value(a), self.value(x));
        if av.rank() != 2 || xv.rank() != 1 || av.rows() != xv.len() {
            return Err(Error::shape("tmatvec", &[av.shape(), xv.shape()]));
        }
        let out = tensor::matmul_tn(av.data(), xv.data(), av.rows(), av.cols(), 1);
        Ok(self.push(Tensor::vector(out), Op::TMatVec(a, x)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", &[av.shape(), bv.shape()]));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = tensor::matmul(av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the row-batched form of a linear layer.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(Error::shape("matmul_nt", &[av.shape(), bv.shape()]));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let out = tensor::matmul_nt(av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("transpose", &[av.shape()]));
        }
        Ok(self.push(av.transpose(), Op::Transpose(a)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", &av, &bv)?;
        Ok(self.push(av.zip_map(&bv, |x, y| x + y), Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", &av, &bv)?;
        Ok(self.push(av.zip_map(&bv, |x, y| x - y), Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", &av, &bv)?;
        Ok(self.push(av.zip_map(&bv, |x, y| x * y), Op::Mul(a, b)))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&self, m: Var, v: Var) -> Result<Var> {
        let (mv, vv) = (self.value(m), self.value(v));
        if mv.rank() != 2 || vv.rank() != 1 || mv.cols() != vv.len() {
            return Err(Error::shape("add_row", &[mv.shape(), vv.shape()]));
        }
        let cols = mv.cols();
        let mut out = (*mv).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vv.data()[i % cols];
        }
        Ok(self.push(out, Op::AddRow(m, v)))
    }

    /// Repeats vector `v` as `rows` identical rows.
    pub fn broadcast_rows(&self, v: Var, rows: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.rank() != 1 {
            return Err(Error::shape("broadcast_rows", &[vv.shape()]));
        }
        let data = vv.data().repeat(rows);
        Ok(self.push(Tensor::matrix(rows, vv.len(), data)?, Op::BroadcastRows(v)))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    /// Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = match (xv.rank(), axis) {
            (1, 0) => (1, xv.len()),
            (2, 0 | 1) => (xv.rows(), xv.cols()),
            _ => return Err(Error::shape("softmax", &[xv.shape()])),
        };
        let lane_len = if xv.rank() == 2 && axis == 0 { rows } else { cols };
        if lane_len == 0 {
            return Err(Error::Empty("softmax"));
        }
        let out = if xv.rank() == 2 && axis == 0 {
            softmax_slice_lanes(&xv.transpose()).transpose()
        } else {
            softmax_slice_lanes(&xv)
        };
        Ok(self.push(out, Op::Softmax { input: x, axis }))
    }

    /// Softmax over the entries where `mask` is true; masked entries are exactly zero.
    pub fn masked_softmax(&self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || xv.len() != mask.len() {
            return Err(Error::shape("masked_softmax", &[xv.shape(), &[mask.len()]]));
        }
        let kept: Vec<f64> = xv
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        if kept.is_empty() {
            return Err(Error::Empty("masked_softmax"));
        }
        let mut probs = softmax_slice(&kept).into_iter();
        let out = mask
            .iter()
            .map(|&m| if m { probs.next().unwrap_or(0.0) } else { 0.0 })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MaskedSoftmax(x)))
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(Error::shape("log_softmax", &[xv.shape()]));
        }
        if xv.is_empty() {
            return Err(Error::Empty("log_softmax"));
        }
        let max = xv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(self.push(xv.map(|v| v - lse), Op::LogSoftmax(x)))
    }

    /// Scales a nonnegative vector to unit sum; below [`MIN_MASS`] returns the uniform vector.
    pub fn normalize_l1(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || xv.is_empty() {
            return Err(Error::shape("normalize_l1", &[xv.shape()]));
        }
        debug_assert!(xv.data().iter().all(|&v| v >= 0.0));
        let total = xv.sum();
        let degenerate = total < MIN_MASS;
        let out = if degenerate {
            Tensor::full(xv.shape(), 1.0 / xv.len() as f64)
        } else {
            xv.map(|v| v / total)
        };
        Ok(self.push(
            out,
            Op::NormalizeL1 {
                input: x,
                degenerate,
            },
        ))
    }

    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 1 {
                return Err(Error::shape("concat", &[pv.shape()]));
            }
            data.extend_from_slice(pv.data());
        }
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    pub fn slice(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || start + len > xv.len() {
            return Err(Error::Shape {
                op: "slice",
                shapes: format!("{:?} with range {start}..{}", xv.shape(), start + len),
            });
        }
        let out = Tensor::vector(xv.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice { input: x, start }))
    }

    pub fn stack_rows(&self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(Error::Empty("stack_rows"))?;
        let cols = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let rv = self.value(r);
            if rv.rank() != 1 || rv.len() != cols {
                return Err(Error::shape("stack_rows", &[&[cols], rv.shape()]));
            }
            data.extend_from_slice(rv.data());
        }
        Ok(self.push(
            Tensor::matrix(rows.len(), cols, data)?,
            Op::StackRows(rows.to_vec()),
        ))
    }

    pub fn row(&self, m: Var, index: usize) -> Result<Var> {
        let mv = self.value(m);
        if mv.rank() != 2 || index >= mv.rows() {
            return Err(Error::Shape {
                op: "row",
                shapes: format!("{:?} row {index}", mv.shape()),
            });
        }
        Ok(self.push(Tensor::vector(mv.row(index).to_vec()), Op::Row(m, index)))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn index(&self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || i >= xv.len() {
            return Err(Error::Shape {
                op: "index",
                shapes: format!("{:?} index {i}", xv.shape()),
            });
        }
        Ok(self.push(Tensor::scalar(xv.data()[i]), Op::Index(x, i)))
    }

    /// Dense `n × n` matrix with `values[e]` at `edges[e]` and zero elsewhere.
    pub fn scatter_edges(&self, values: Var, edges: Rc<[(usize, usize)]>, n: usize) -> Result<Var> {
        let vv = self.value(values);
        if vv.rank() != 1 || vv.len() != edges.len() {
            return Err(Error::shape("scatter_edges", &[vv.shape(), &[edges.len()]]));
        }
        let mut out = vec![0.0; n * n];
        for (&(i, j), &v) in edges.iter().zip(vv.data()) {
            if i >= n || j >= n {
                return Err(Error::Shape {
                    op: "scatter_edges",
                    shapes: format!("edge ({i}, {j}) outside {n} nodes"),
                });
            }
            out[i * n + j] += v;
        }
        Ok(self.push(
            Tensor::matrix(n, n, out)?,
            Op::ScatterEdges {
                input: values,
                edges,
            },
        ))
    }

    /// `Σ_m weights[m] · inputs[m]` over same-shape inputs.
    pub fn mix(&self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        if wv.rank() != 1 || wv.len() != inputs.len() || inputs.is_empty() {
            return Err(Error::shape("mix", &[wv.shape(), &[inputs.len()]]));
        }
        let first = self.value(inputs[0]);
        let mut out = Tensor::zeros(first.shape());
        for (&w, &x) in wv.data().iter().zip(inputs) {
            let xv = self.value(x);
            same_shape("mix", &first, &xv)?;
            for (o, v) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += w * v;
            }
        }
        Ok(self.push(
            out,
            Op::Mix {
                weights,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let mut send = |v: Var, contribution: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            };
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::MatVec(a, x) => {
                    let (av, xv) = (val(*a), val(*x));
                    let (m, k) = (av.rows(), av.cols());
                    let da = tensor::matmul(g.data(), xv.data(), m, 1, k);
                    let dx = tensor::matmul_tn(av.data(), g.data(), m, k, 1);
                    send(*a, Tensor::matrix(m, k, da)?);
                    send(*x, Tensor::vector(dx));
                }
                Op::TMatVec(a, x) => {
                    let (av, xv) = (val(*a), val(*x));
                    let (k, m) = (av.rows(), av.cols());
                    let da = tensor::matmul(xv.data(), g.data(), k, 1, m);
                    let dx = tensor::matmul(av.data(), g.data(), k, m, 1);
                    send(*a, Tensor::matrix(k, m, da)?);
                    send(*x, Tensor::vector(dx));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let da = tensor::matmul_nt(g.data(), bv.data(), m, n, k);
                    let db = tensor::matmul_tn(av.data(), g.data(), m, k, n);
                    send(*a, Tensor::matrix(m, k, da)?);
                    send(*b, Tensor::matrix(k, n, db)?);
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    let da = tensor::matmul(g.data(), bv.data(), m, n, k);
                    let db = tensor::matmul_tn(g.data(), av.data(), m, n, k);
                    send(*a, Tensor::matrix(m, k, da)?);
                    send(*b, Tensor::matrix(n, k, db)?);
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    send(*a, g.zip_map(bv, |gv, y| gv * y));
                    send(*b, g.zip_map(av, |gv, x| gv * x));
                }
                Op::AddRow(m, v) => {
                    let cols = g.cols();
                    let mut dv = vec![0.0; cols];
                    for (i, gv) in g.data().iter().enumerate() {
                        dv[i % cols] += gv;
                    }
                    send(*v, Tensor::vector(dv));
                    send(*m, g);
                }
                Op::BroadcastRows(v) => {
                    let cols = g.cols();
                    let mut dv = vec![0.0; cols];
                    for (i, gv) in g.data().iter().enumerate() {
                        dv[i % cols] += gv;
                    }
                    send(*v, Tensor::vector(dv));
                }
                Op::Scale(a, factor) => send(*a, g.map(|v| v * factor)),
                Op::Relu(a) => {
                    let av = val(*a);
                    send(*a, g.zip_map(av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
                }
                Op::Tanh(a) => send(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
                Op::Sigmoid(a) => send(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
                Op::Softmax { input, axis } => {
                    let dx = if out.rank() == 2 && *axis == 0 {
                        softmax_backward_lanes(&out.transpose(), &g.transpose()).transpose()
                    } else {
                        softmax_backward_lanes(out, &g)
                    };
                    send(*input, dx);
                }
                Op::MaskedSoftmax(input) => send(*input, softmax_backward_lanes(out, &g)),
                Op::LogSoftmax(input) => {
                    let gsum = g.sum();
                    send(*input, g.zip_map(out, |gv, y| gv - y.exp() * gsum));
                }
                Op::NormalizeL1 { input, degenerate } => {
                    if !*degenerate {
                        let total = val(*input).sum();
                        let dot: f64 = g.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
                        send(*input, g.map(|gv| (gv - dot) / total));
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).len();
                        send(p, Tensor::vector(g.data()[offset..offset + len].to_vec()));
                        offset += len;
                    }
                }
                Op::Slice { input, start } => {
                    let mut dx = Tensor::zeros(val(*input).shape());
                    dx.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    send(*input, dx);
                }
                Op::StackRows(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        send(r, Tensor::vector(g.row(i).to_vec()));
                    }
                }
                Op::Row(m, index) => {
                    let mv = val(*m);
                    let mut dm = Tensor::zeros(mv.shape());
                    let cols = mv.cols();
                    dm.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                    send(*m, dm);
                }
                Op::Reshape(x) => send(*x, g.reshaped(val(*x).shape().to_vec())?),
                Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.item())),
                Op::Index(x, i) => {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    dx.data_mut()[*i] = g.item();
                    send(*x, dx);
                }
                Op::ScatterEdges { input, edges } => {
                    let n = g.cols();
                    let dv = edges.iter().map(|&(i, j)| g.data()[i * n + j]).collect();
                    send(*input, Tensor::vector(dv));
                }
                Op::Mix { weights, inputs } => {
                    let wv = val(*weights);
                    let dw = inputs
                        .iter()
                        .map(|&x| g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum())
                        .collect();
                    for (&w, &x) in wv.data().iter().zip(inputs) {
                        send(x, g.map(|gv| gv * w));
                    }
                    send(*weights, Tensor::vector(dw));
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn softmax_slice_lanes(x: &Tensor) -> Tensor {
    let lane = x.shape().last().copied().unwrap_or(1);
    let data = x.data().chunks(lane).flat_map(softmax_slice).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `dx = y ⊙ (g − ⟨g, y⟩)` per lane.
fn softmax_backward_lanes(y: &Tensor, g: &Tensor) -> Tensor {
    let lane = y.shape().last().copied().unwrap_or(1);
    let mut dx = Vec::with_capacity(y.len());
    for (ys, gs) in y.data().chunks(lane).zip(g.data().chunks(lane)) {
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        dx.extend(ys.iter().zip(gs).map(|(yv, gv)| yv * (gv - dot)));
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}
