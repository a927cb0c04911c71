//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the indices of its inputs. [`Tape::backward`] walks the nodes in reverse
//! and accumulates adjoints into each input. A tape supports exactly one
//! backward pass; record a fresh tape for the next step.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Offset added after `ELU(x) + 1` so variances stay strictly positive.
pub const ELU_EPSILON: f64 = 1e-15;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis of a 2-D tensor. `Rows` reduces down each column, `Cols` along each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    /// `ELU(x) + 1 + ε`, strictly positive.
    EluOffset,
    Softmax(Axis),
    Identity,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Binary(Elementwise, usize, usize),
    Affine { x: usize, scale: T },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    EluOffset(usize),
    Sqrt(usize),
    LogClamp { x: usize, lo: T, hi: T },
    Softmax { x: usize, axis: Axis },
    Sum(usize),
    SumAxis { x: usize, axis: Axis },
    BroadcastCols(usize),
    ConcatRows(Vec<usize>),
    Column { x: usize, index: usize },
    StackCols(Vec<usize>),
    Select { mask: Rc<[bool]>, a: usize, b: usize },
    Reshape(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    needs_grad: bool,
}

/// Records a forward pass. Confined to one thread.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of the trainable leaves after a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
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

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = requires_grad
            || match &op {
                Op::Leaf => false,
                other => parents(other).iter().any(|&p| nodes[p].needs_grad),
            };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, false)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(value, Op::MatMul(a.0, b.0), false))
    }

    /// Elementwise binary op. Operands share a shape, or one is a single
    /// element broadcast over the other.
    pub fn elementwise(&self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let f = |p: T, q: T| match op {
                Elementwise::Add => p + q,
                Elementwise::Sub => p - q,
                Elementwise::Mul => p * q,
            };
            if x.shape() == y.shape() {
                let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(x.shape().to_vec(), data)?
            } else if y.len() == 1 {
                let q = y.data()[0];
                x.map(|p| f(p, q))
            } else if x.len() == 1 {
                let p = x.data()[0];
                y.map(|q| f(p, q))
            } else {
                return Err(Error::dim("elementwise", x.shape(), y.shape()));
            }
        };
        Ok(self.push(value, Op::Binary(op, a.0, b.0), false))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    /// `scale · x + shift`.
    pub fn affine(&self, x: Var, scale: T, shift: T) -> Var {
        self.unary(x, Op::Affine { x: x.0, scale }, |v| scale * v + shift)
    }

    /// `1 − x`.
    pub fn one_minus(&self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn activation(&self, kind: Activation, x: Var) -> Result<Var> {
        Ok(match kind {
            Activation::Sigmoid => self.unary(x, Op::Sigmoid(x.0), sigmoid),
            Activation::Tanh => self.unary(x, Op::Tanh(x.0), T::tanh),
            Activation::Relu => self.unary(x, Op::Relu(x.0), |v| v.max(T::zero())),
            Activation::EluOffset => self.unary(x, Op::EluOffset(x.0), elu_offset),
            Activation::Softmax(axis) => return self.softmax(x, axis),
            Activation::Identity => x,
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x.0), sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), T::tanh)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x.0), |v| v.max(T::zero()))
    }

    pub fn elu_offset(&self, x: Var) -> Var {
        self.unary(x, Op::EluOffset(x.0), elu_offset)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x.0), T::sqrt)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where clamping is active.
    pub fn log_clamp(&self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::LogClamp { x: x.0, lo, hi }, |v| v.max(lo).min(hi).ln())
    }

    pub fn softmax(&self, x: Var, axis: Axis) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[x.0].value;
            let (m, n) = src.matrix_dims("softmax")?;
            let mut out = src.clone();
            for_each_lane(m, n, axis, |lane| {
                let data = out.data_mut();
                let max = lane.clone().map(|i| data[i]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in lane.clone() {
                    data[i] = (data[i] - max).exp();
                    total += data[i];
                }
                for i in lane {
                    data[i] = data[i] / total;
                }
            });
            out
        };
        Ok(self.push(value, Op::Softmax { x: x.0, axis }, false))
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().fold(T::zero(), |a, b| a + b);
        self.push(Tensor::scalar(total), Op::Sum(x.0), false)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum(x);
        self.affine(s, T::one() / n, T::zero())
    }

    /// Sums a matrix along `axis`: `Cols` gives an `m × 1` column, `Rows` a `1 × n` row.
    pub fn sum_axis(&self, x: Var, axis: Axis) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[x.0].value;
            let (m, n) = src.matrix_dims("sum_axis")?;
            let shape = match axis {
                Axis::Cols => vec![m, 1],
                Axis::Rows => vec![1, n],
            };
            let mut out = Vec::with_capacity(shape[0] * shape[1]);
            for_each_lane(m, n, axis, |lane| {
                out.push(lane.map(|i| src.data()[i]).fold(T::zero(), |a, b| a + b));
            });
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::SumAxis { x: x.0, axis }, false))
    }

    /// Repeats an `m × 1` column into an `m × cols` matrix.
    pub fn broadcast_cols(&self, x: Var, cols: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[x.0].value;
            if src.cols() != 1 {
                return Err(Error::dim("broadcast_cols", src.shape(), &[src.rows(), 1]));
            }
            let data = src.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
            Tensor::new(vec![src.rows(), cols], data)?
        };
        Ok(self.push(value, Op::BroadcastCols(x.0), false))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                if t.cols() != cols {
                    return Err(Error::dim("concat_rows", &[rows, cols], t.shape()));
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatRows(ids), false))
    }

    /// Column `index` of a matrix, as an `m × 1` column.
    pub fn column(&self, x: Var, index: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let src = &nodes[x.0].value;
            let (_, n) = src.matrix_dims("column")?;
            if index >= n {
                return Err(Error::dim("column", src.shape(), &[index]));
            }
            Tensor::column(src.column_values(index))
        };
        Ok(self.push(value, Op::Column { x: x.0, index }, false))
    }

    /// Places equally long columns side by side.
    pub fn stack_cols(&self, cols: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let m = nodes[cols[0].0].value.len();
            let n = cols.len();
            let mut data = vec![T::zero(); m * n];
            for (j, c) in cols.iter().enumerate() {
                let t = &nodes[c.0].value;
                if t.len() != m || t.cols() != 1 {
                    return Err(Error::dim("stack_cols", &[m, 1], t.shape()));
                }
                for (i, &v) in t.data().iter().enumerate() {
                    data[i * n + j] = v;
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        let ids = cols.iter().map(|c| c.0).collect();
        Ok(self.push(value, Op::StackCols(ids), false))
    }

    /// Cellwise `mask ? a : b`. Cells not selected are never read, so they
    /// may hold sentinels such as NaN.
    pub fn select(&self, mask: Rc<[bool]>, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() || x.len() != mask.len() {
                return Err(Error::dim("select", x.shape(), y.shape()));
            }
            let data = mask
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&m, (&p, &q))| if m { p } else { q })
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Select { mask, a: a.0, b: b.0 }, false))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0), false))
    }

    /// Reverse pass from a scalar `loss`. Every trainable leaf gets an
    /// adjoint of its own shape; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            self.consumed.set(false);
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            propagate(&nodes, i, &g, &mut adj);
        }

        let mut grads = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad {
                let shape = node.value.shape().to_vec();
                let g = match adj.get_mut(i).and_then(Option::take) {
                    Some(g) => Tensor::new(shape, g)?,
                    None => Tensor::zeros(&shape),
                };
                grads.insert(Var(i), g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn elu_offset<T: Scalar>(v: T) -> T {
    let eps = T::of(ELU_EPSILON);
    if v > T::zero() {
        v + T::one() + eps
    } else {
        v.exp() + eps
    }
}

fn parents<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::Select { a, b, .. } => vec![*a, *b],
        Op::Affine { x, .. }
        | Op::LogClamp { x, .. }
        | Op::Softmax { x, .. }
        | Op::SumAxis { x, .. }
        | Op::Column { x, .. } => vec![*x],
        Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Relu(x)
        | Op::EluOffset(x)
        | Op::Sqrt(x)
        | Op::Sum(x)
        | Op::BroadcastCols(x)
        | Op::Reshape(x) => vec![*x],
        Op::ConcatRows(xs) | Op::StackCols(xs) => xs.clone(),
    }
}

/// Visits each lane of an `m × n` row-major matrix as an iterator of flat indices.
fn for_each_lane<F>(m: usize, n: usize, axis: Axis, mut f: F)
where
    F: FnMut(std::iter::StepBy<std::ops::Range<usize>>),
{
    match axis {
        Axis::Rows => (0..n).for_each(|j| f((j..m * n).step_by(n))),
        Axis::Cols => (0..m).for_each(|i| f((i * n..(i + 1) * n).step_by(1))),
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], idx: usize, len: usize, f: impl Fn(&mut [T])) {
    let slot = adj[idx].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
    let out = &nodes[i].value;
    let wants = |p: usize| nodes[p].needs_grad;
    let val = |p: usize| &nodes[p].value;
    let unary_chain = |x: usize, adj: &mut [Option<Vec<T>>], d: &dyn Fn(usize) -> T| {
        if wants(x) {
            accumulate(adj, x, g.len(), |acc| {
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += g[k] * d(k);
                }
            });
        }
    };

    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if wants(*a) {
                // dA = G · Bᵀ
                let bt = val(*b).transpose().expect("matrix");
                accumulate(adj, *a, m * k, |acc| matmul_into(g, bt.data(), acc, m, n, k));
            }
            if wants(*b) {
                // dB = Aᵀ · G
                let at = val(*a).transpose().expect("matrix");
                accumulate(adj, *b, k * n, |acc| matmul_into(at.data(), g, acc, k, m, n));
            }
        }
        Op::Binary(kind, a, b) => {
            let (x, y) = (val(*a), val(*b));
            let side = |this: usize, other: &Tensor<T>, sign: T, adj: &mut [Option<Vec<T>>]| {
                let this_len = val(this).len();
                let local = |k: usize| -> T {
                    match kind {
                        Elementwise::Mul => {
                            if other.len() == 1 {
                                other.data()[0]
                            } else {
                                other.data()[k]
                            }
                        }
                        _ => sign,
                    }
                };
                accumulate(adj, this, this_len, |acc| {
                    if this_len == g.len() {
                        for (k, a) in acc.iter_mut().enumerate() {
                            *a += g[k] * local(k);
                        }
                    } else {
                        // broadcast scalar: sum contributions
                        let total: T = g
                            .iter()
                            .enumerate()
                            .map(|(k, &gk)| gk * local(k))
                            .fold(T::zero(), |a, b| a + b);
                        acc[0] += total;
                    }
                });
            };
            let b_sign = if *kind == Elementwise::Sub { -T::one() } else { T::one() };
            if wants(*a) {
                side(*a, y, T::one(), adj);
            }
            if wants(*b) {
                side(*b, x, b_sign, adj);
            }
        }
        Op::Affine { x, scale } => unary_chain(*x, adj, &|_| *scale),
        Op::Sigmoid(x) => unary_chain(*x, adj, &|k| {
            let s = out.data()[k];
            s * (T::one() - s)
        }),
        Op::Tanh(x) => unary_chain(*x, adj, &|k| {
            let t = out.data()[k];
            T::one() - t * t
        }),
        Op::Relu(x) => {
            let src = val(*x);
            unary_chain(*x, adj, &|k| {
                if src.data()[k] > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
        Op::EluOffset(x) => {
            let src = val(*x);
            unary_chain(*x, adj, &|k| {
                let v = src.data()[k];
                if v > T::zero() {
                    T::one()
                } else {
                    v.exp()
                }
            })
        }
        Op::Sqrt(x) => unary_chain(*x, adj, &|k| T::one() / (T::of(2.0) * out.data()[k])),
        Op::LogClamp { x, lo, hi } => {
            let src = val(*x);
            unary_chain(*x, adj, &|k| {
                let v = src.data()[k];
                if v >= *lo && v <= *hi {
                    T::one() / v
                } else {
                    T::zero()
                }
            })
        }
        Op::Softmax { x, axis } => {
            if wants(*x) {
                let (m, n) = (out.rows(), out.cols());
                let y = out.data();
                accumulate(adj, *x, m * n, |acc| {
                    for_each_lane(m, n, *axis, |lane| {
                        let s: T = lane.clone().map(|k| g[k] * y[k]).fold(T::zero(), |a, b| a + b);
                        for k in lane {
                            acc[k] += y[k] * (g[k] - s);
                        }
                    });
                });
            }
        }
        Op::Sum(x) => {
            if wants(*x) {
                let len = val(*x).len();
                accumulate(adj, *x, len, |acc| acc.iter_mut().for_each(|a| *a += g[0]));
            }
        }
        Op::SumAxis { x, axis } => {
            if wants(*x) {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                accumulate(adj, *x, m * n, |acc| {
                    let mut lane_id = 0;
                    for_each_lane(m, n, *axis, |lane| {
                        for k in lane {
                            acc[k] += g[lane_id];
                        }
                        lane_id += 1;
                    });
                });
            }
        }
        Op::BroadcastCols(x) => {
            if wants(*x) {
                let cols = out.cols();
                accumulate(adj, *x, out.rows(), |acc| {
                    for (r, a) in acc.iter_mut().enumerate() {
                        *a += g[r * cols..(r + 1) * cols]
                            .iter()
                            .copied()
                            .fold(T::zero(), |a, b| a + b);
                    }
                });
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                if wants(p) {
                    accumulate(adj, p, len, |acc| {
                        for (a, &gk) in acc.iter_mut().zip(&g[offset..offset + len]) {
                            *a += gk;
                        }
                    });
                }
                offset += len;
            }
        }
        Op::Column { x, index } => {
            if wants(*x) {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                accumulate(adj, *x, m * n, |acc| {
                    for r in 0..m {
                        acc[r * n + index] += g[r];
                    }
                });
            }
        }
        Op::StackCols(cols) => {
            let n = cols.len();
            for (j, &c) in cols.iter().enumerate() {
                if wants(c) {
                    let m = val(c).len();
                    accumulate(adj, c, m, |acc| {
                        for (r, a) in acc.iter_mut().enumerate() {
                            *a += g[r * n + j];
                        }
                    });
                }
            }
        }
        Op::Select { mask, a, b } => {
            for (&p, take) in [(a, true), (b, false)] {
                if wants(p) {
                    accumulate(adj, p, g.len(), |acc| {
                        for (k, a) in acc.iter_mut().enumerate() {
                            if mask[k] == take {
                                *a += g[k];
                            }
                        }
                    });
                }
            }
        }
        Op::Reshape(x) => unary_chain(*x, adj, &|_| T::one()),
    }
}
