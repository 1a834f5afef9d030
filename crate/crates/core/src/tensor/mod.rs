//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operation as a [`Node`] holding the forward
//! result and enough context to run the backward rule. [`Tensor`] is a
//! cheap handle (tape reference + node index). Leaves may be bound to a
//! [`Param`], whose persistent value/gradient storage outlives any tape.
//!
//! Values are `f64` in row-major order. All kernels accumulate in a fixed
//! order, so results are bitwise reproducible for identical inputs, with
//! or without internal parallelism.

mod gradcheck;
mod ops;

pub use gradcheck::finite_diff_check;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use ops::Op;

// ── Parameters ──────────────────────────────────────────────────────────────

/// Persistent trainable storage shared by reference.
///
/// Cloning a `Param` clones the handle, not the data: two clones always see
/// the same value and gradient. This is what ties weights that must stay
/// identical (shared decoders) to a single storage location.
#[derive(Clone)]
pub struct Param {
    inner: Rc<ParamInner>,
}

struct ParamInner {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if value.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "param",
                lhs: shape.to_vec(),
                rhs: vec![value.len()],
            });
        }
        let grad = vec![0.0; numel];
        Ok(Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                shape: shape.to_vec(),
                value: RefCell::new(value),
                grad: RefCell::new(grad),
            }),
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Param::new(name, shape, vec![0.0; numel]).expect("length matches by construction")
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.value.borrow().clone()
    }

    pub fn grad(&self) -> Vec<f64> {
        self.inner.grad.borrow().clone()
    }

    pub fn set_value(&self, value: &[f64]) -> Result<()> {
        let mut v = self.inner.value.borrow_mut();
        if value.len() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "param.set_value",
                lhs: self.inner.shape.clone(),
                rhs: vec![value.len()],
            });
        }
        v.copy_from_slice(value);
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.inner.grad.borrow_mut().fill(0.0);
    }

    /// Mutate the stored value in place. Used by optimizers and EMA updates.
    pub fn update_value(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let mut v = self.inner.value.borrow_mut();
        let g = self.inner.grad.borrow();
        f(&mut v, &g);
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param")
            .field("name", &self.inner.name)
            .field("shape", &self.inner.shape)
            .finish()
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
    pub(crate) param: Option<Param>,
}

/// Recording of one forward computation, shared by all its tensors.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.borrow().is_empty()
    }

    /// Drop all recorded nodes. Tensor handles into the old recording must
    /// not be used afterwards.
    pub fn clear(&self) {
        self.inner.borrow_mut().clear();
    }

    fn push(&self, node: Node) -> Tensor {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        let shape = node.shape.clone();
        nodes.push(node);
        Tensor { tape: self.clone(), id, shape }
    }

    pub(crate) fn push_result(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Tensor {
        self.push(Node { shape, data, grad: None, requires_grad, op, param: None })
    }

    /// Leaf with explicit data. `requires_grad` leaves receive gradients on
    /// [`Tape::backward`]; constants do not.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad,
            op: Op::Leaf,
            param: None,
        }))
    }

    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor {
        self.leaf(&[1], vec![value], false).expect("scalar leaf")
    }

    /// Leaf bound to persistent parameter storage. The current parameter
    /// value is copied onto the tape; after backward, the leaf gradient is
    /// added into the parameter's gradient buffer.
    pub fn param(&self, param: &Param) -> Tensor {
        self.push(Node {
            shape: param.shape().to_vec(),
            data: param.value(),
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
            param: Some(param.clone()),
        })
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Node gradients from any previous sweep are discarded; parameter
    /// gradients accumulate until [`Param::zero_grad`]. A tensor used in
    /// several places receives the sum of all its downstream contributions.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::domain("backward", "loss recorded on a different tape"));
        }
        if loss.numel() != 1 {
            return Err(Error::domain(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape),
            ));
        }
        let mut nodes = self.inner.borrow_mut();
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        nodes[loss.id].grad = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let (parents, rest) = nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            ops::backward_step(node, parents);
        }
        for node in nodes.iter() {
            if let (Some(param), Some(grad)) = (&node.param, &node.grad) {
                param.accumulate_grad(grad);
            }
        }
        Ok(())
    }
}

// ── Tensor handle ───────────────────────────────────────────────────────────

/// Handle to one tape node. Cloning is cheap and refers to the same node.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.inner.borrow()[self.id].data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::domain(
                "item",
                format!("expected one element, got shape {:?}", self.shape),
            ));
        }
        Ok(self.tape.inner.borrow()[self.id].data[0])
    }

    /// Gradient from the most recent backward sweep, if this node received one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow()[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow()[self.id].requires_grad
    }

    fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.inner.borrow()[self.id].data)
    }

    fn same_tape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::domain(op, "operands recorded on different tapes"))
        }
    }

    fn binary_elementwise(
        &self,
        other: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.same_tape(other, op_name)?;
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let rg = self.requires_grad() || other.requires_grad();
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<f64>>())
        });
        Ok(self
            .tape
            .push_result(self.shape.clone(), data, rg, make_op(self.id, other.id)))
    }

    // ── Arithmetic ──────────────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.with_data(|b| b.contains(&0.0)) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary_elementwise(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.with_data(|a| a.iter().map(|x| x + c).collect());
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            self.requires_grad(),
            Op::AddScalar { x: self.id },
        ))
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.with_data(|a| a.iter().map(|x| x * c).collect());
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            self.requires_grad(),
            Op::MulScalar { x: self.id, c },
        ))
    }

    /// `[m, n] + [n]`, the vector added to every row.
    pub fn add_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        self.same_tape(v, "add_row_vec")?;
        let bad = self.shape.len() != 2 || v.shape.len() != 1 || self.shape[1] != v.shape[0];
        if bad {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let n = v.shape[0];
        let rg = self.requires_grad() || v.requires_grad();
        let data = self.with_data(|a| {
            v.with_data(|b| {
                a.chunks(n)
                    .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
                    .collect::<Vec<f64>>()
            })
        });
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            rg,
            Op::AddRowVec { x: self.id, v: v.id },
        ))
    }

    /// `[c, h, w] + [c]`, one bias per channel plane.
    pub fn add_chan(&self, b: &Tensor) -> Result<Tensor> {
        self.same_tape(b, "add_chan")?;
        let bad = self.shape.len() != 3 || b.shape.len() != 1 || self.shape[0] != b.shape[0];
        if bad {
            return Err(Error::ShapeMismatch {
                op: "add_chan",
                lhs: self.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let plane = self.shape[1] * self.shape[2];
        let rg = self.requires_grad() || b.requires_grad();
        let data = self.with_data(|x| {
            b.with_data(|bias| {
                let mut out = x.to_vec();
                for (c, chunk) in out.chunks_mut(plane).enumerate() {
                    for v in chunk.iter_mut() {
                        *v += bias[c];
                    }
                }
                out
            })
        });
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            rg,
            Op::AddChan { x: self.id, b: b.id },
        ))
    }

    // ── Linear algebra ──────────────────────────────────────────────────────

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "matmul")?;
        let ok = self.shape.len() == 2 && other.shape.len() == 2 && self.shape[1] == other.shape[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let rg = self.requires_grad() || other.requires_grad();
        let data = self.with_data(|a| other.with_data(|b| ops::matmul_kernel(a, b, m, k, n)));
        Ok(self.tape.push_result(
            vec![m, n],
            data,
            rg,
            Op::MatMul { a: self.id, b: other.id, m, k, n },
        ))
    }

    /// `[batch, m, k] × [batch, k, n] → [batch, m, n]`.
    pub fn batch_matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "batch_matmul")?;
        let ok = self.shape.len() == 3
            && other.shape.len() == 3
            && self.shape[0] == other.shape[0]
            && self.shape[2] == other.shape[1];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (batch, m, k, n) = (self.shape[0], self.shape[1], self.shape[2], other.shape[2]);
        let rg = self.requires_grad() || other.requires_grad();
        let data = self.with_data(|a| {
            other.with_data(|b| {
                let mut out = vec![0.0; batch * m * n];
                for bi in 0..batch {
                    let ab = &a[bi * m * k..(bi + 1) * m * k];
                    let bb = &b[bi * k * n..(bi + 1) * k * n];
                    out[bi * m * n..(bi + 1) * m * n]
                        .copy_from_slice(&ops::matmul_kernel(ab, bb, m, k, n));
                }
                out
            })
        });
        Ok(self.tape.push_result(
            vec![batch, m, n],
            data,
            rg,
            Op::BatchMatMul { a: self.id, b: other.id, batch, m, k, n },
        ))
    }

    /// Axis permutation of a rank-3 tensor.
    pub fn permute3(&self, perm: [usize; 3]) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "permute3",
                lhs: self.shape.clone(),
                rhs: perm.to_vec(),
            });
        }
        let mut seen = [false; 3];
        for &p in &perm {
            if p > 2 || seen[p] {
                return Err(Error::domain("permute3", format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape = vec![self.shape[perm[0]], self.shape[perm[1]], self.shape[perm[2]]];
        let data = self.with_data(|x| ops::permute3_kernel(x, &self.shape, perm));
        Ok(self.tape.push_result(
            out_shape,
            data,
            self.requires_grad(),
            Op::Permute3 { x: self.id, in_shape: [self.shape[0], self.shape[1], self.shape[2]], perm },
        ))
    }

    /// Transpose of a `[m, n]` matrix.
    pub fn transpose2(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        self.reshape(&[1, m, n])?.permute3([0, 2, 1])?.reshape(&[n, m])
    }

    /// Concatenate along the leading axis; trailing dimensions must match.
    pub fn concat0(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other, "concat0")?;
        let ok = self.shape.len() == other.shape.len()
            && !self.shape.is_empty()
            && self.shape[1..] == other.shape[1..];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat0",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut shape = self.shape.clone();
        shape[0] += other.shape[0];
        let rg = self.requires_grad() || other.requires_grad();
        let data = self.with_data(|a| {
            other.with_data(|b| {
                let mut out = Vec::with_capacity(a.len() + b.len());
                out.extend_from_slice(a);
                out.extend_from_slice(b);
                out
            })
        });
        Ok(self
            .tape
            .push_result(shape, data, rg, Op::Concat0 { a: self.id, b: other.id }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.with_data(|x| x.to_vec());
        Ok(self.tape.push_result(
            shape.to_vec(),
            data,
            self.requires_grad(),
            Op::Reshape { x: self.id },
        ))
    }

    /// Select rows of a `[m, n]` matrix. Indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: self.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::domain(
                "gather_rows",
                format!("index {bad} out of range for {m} rows"),
            ));
        }
        let data = self.with_data(|x| {
            let mut out = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                out.extend_from_slice(&x[i * n..(i + 1) * n]);
            }
            out
        });
        Ok(self.tape.push_result(
            vec![idx.len(), n],
            data,
            self.requires_grad(),
            Op::GatherRows { x: self.id, idx: idx.to_vec() },
        ))
    }

    /// Place the rows of a `[k, n]` matrix into a zero `[rows, n]` matrix at
    /// the given destinations. Indices must be distinct.
    pub fn scatter_rows(&self, idx: &[usize], rows: usize) -> Result<Tensor> {
        if self.shape.len() != 2 || idx.len() != self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: self.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let n = self.shape[1];
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows {
                return Err(Error::domain(
                    "scatter_rows",
                    format!("index {i} out of range for {rows} rows"),
                ));
            }
            if seen[i] {
                return Err(Error::domain("scatter_rows", format!("duplicate index {i}")));
            }
            seen[i] = true;
        }
        let data = self.with_data(|x| {
            let mut out = vec![0.0; rows * n];
            for (src, &dst) in idx.iter().enumerate() {
                out[dst * n..(dst + 1) * n].copy_from_slice(&x[src * n..(src + 1) * n]);
            }
            out
        });
        Ok(self.tape.push_result(
            vec![rows, n],
            data,
            self.requires_grad(),
            Op::ScatterRows { x: self.id, idx: idx.to_vec() },
        ))
    }

    /// Repeat a `[n]` vector into `[rows, n]`.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: self.shape.clone(),
                rhs: vec![rows],
            });
        }
        let n = self.shape[0];
        let data = self.with_data(|v| {
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                out.extend_from_slice(v);
            }
            out
        });
        Ok(self.tape.push_result(
            vec![rows, n],
            data,
            self.requires_grad(),
            Op::BroadcastRows { v: self.id },
        ))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let n = *self.shape.last().ok_or_else(|| {
            Error::domain("softmax", "rank-0 tensor")
        })?;
        let data = self.with_data(|x| ops::softmax_kernel(x, n));
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            self.requires_grad(),
            Op::Softmax { x: self.id, n },
        ))
    }

    /// Layer normalization over the last axis with affine scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.same_tape(gamma, "layer_norm")?;
        self.same_tape(beta, "layer_norm")?;
        if eps <= 0.0 {
            return Err(Error::domain("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let n = *self
            .shape
            .last()
            .ok_or_else(|| Error::domain("layer_norm", "rank-0 tensor"))?;
        let ok = gamma.shape == [n] && beta.shape == [n];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let (data, mean, inv_std) = self.with_data(|x| {
            gamma.with_data(|g| beta.with_data(|b| ops::layer_norm_kernel(x, g, b, n, eps)))
        });
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            rg,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, n, mean, inv_std },
        ))
    }

    /// Gaussian error linear unit, exact form.
    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.with_data(|x| x.iter().map(|&v| ops::gelu_scalar(v)).collect());
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            self.requires_grad(),
            Op::Gelu { x: self.id },
        ))
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.with_data(|x| x.iter().map(|v| v.exp()).collect());
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            self.requires_grad(),
            Op::Exp { x: self.id },
        ))
    }

    /// Natural log. Errors on any element `<= 0`.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.with_data(|x| x.iter().copied().find(|&v| v <= 0.0)) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let data = self.with_data(|x| x.iter().map(|v| v.ln()).collect());
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            self.requires_grad(),
            Op::Log { x: self.id },
        ))
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs(&self) -> Result<Tensor> {
        let data = self.with_data(|x| x.iter().map(|v| v.abs()).collect());
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            self.requires_grad(),
            Op::Abs { x: self.id },
        ))
    }

    /// `ln(1 + e^x)`, computed in the overflow-safe form.
    pub fn softplus(&self) -> Result<Tensor> {
        let data = self.with_data(|x| x.iter().map(|&v| ops::softplus_scalar(v)).collect());
        Ok(self.tape.push_result(
            self.shape.clone(),
            data,
            self.requires_grad(),
            Op::Softplus { x: self.id },
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────────────

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s = self.with_data(|x| x.iter().sum::<f64>());
        Ok(self.tape.push_result(
            vec![1],
            vec![s],
            self.requires_grad(),
            Op::Sum { x: self.id },
        ))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::domain("mean", "empty tensor"));
        }
        let s = self.with_data(|x| x.iter().sum::<f64>());
        Ok(self.tape.push_result(
            vec![1],
            vec![s / n as f64],
            self.requires_grad(),
            Op::Mean { x: self.id, n },
        ))
    }

    // ── Convolution and resampling ──────────────────────────────────────────

    /// 2D convolution, stride 1, zero padding.
    ///
    /// Input `[c_in, h, w]`, kernel `[c_out, c_in, kh, kw]`, output
    /// `[c_out, h + 2 pad − kh + 1, w + 2 pad − kw + 1]`.
    pub fn conv2d(&self, kernel: &Tensor, pad: usize) -> Result<Tensor> {
        self.same_tape(kernel, "conv2d")?;
        let ok = self.shape.len() == 3 && kernel.shape.len() == 4 && self.shape[0] == kernel.shape[1];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: kernel.shape.clone(),
            });
        }
        let (ci, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (co, kh, kw) = (kernel.shape[0], kernel.shape[2], kernel.shape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::domain(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} pad {pad}"),
            ));
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let rg = self.requires_grad() || kernel.requires_grad();
        let data = self.with_data(|x| {
            kernel.with_data(|k| ops::conv2d_kernel(x, k, ci, h, w, co, kh, kw, pad))
        });
        Ok(self.tape.push_result(
            vec![co, oh, ow],
            data,
            rg,
            Op::Conv2d { x: self.id, k: kernel.id, ci, h, w, co, kh, kw, pad },
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[c, h, w]`.
    pub fn upsample2x(&self) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "upsample2x",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let data = self.with_data(|x| ops::upsample2x_kernel(x, c, h, w));
        Ok(self.tape.push_result(
            vec![c, 2 * h, 2 * w],
            data,
            self.requires_grad(),
            Op::Upsample2x { x: self.id, c, h, w },
        ))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}
