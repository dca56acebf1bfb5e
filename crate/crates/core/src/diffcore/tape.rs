//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! the nodes that require gradients. Intermediate gradients are released as
//! soon as they have been propagated; only leaf gradients are returned.

use std::borrow::Cow;
use std::collections::HashMap;

use super::linalg::{gemm, Layout, LuFactors};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    SwapLastAxes(Var),
    Reshape(Var),
    NarrowCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Mean(Var),
    MeanGroups {
        input: Var,
        group: usize,
    },
    RepeatElems {
        input: Var,
        times: usize,
    },
    Solve {
        matrix: Var,
        rhs: Var,
        lu: LuFactors<T>,
    },
    Trace(Var),
}

struct Node<'s, T: Scalar> {
    value: Cow<'s, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<'s, T: Scalar = f32> {
    nodes: Vec<Node<'s, T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Collects gradients of parameter leaves, indexed by [`ParamId`].
    pub fn into_param_grads(mut self, param_count: usize) -> ParamGrads<T> {
        let mut grads = ParamGrads::empty(param_count);
        for (id, var) in std::mem::take(&mut self.params) {
            if let Some(g) = self.leaves[var.0].take() {
                grads.insert(id, g);
            }
        }
        grads
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    shape
        .last()
        .copied()
        .ok_or_else(|| Error::shape(op, shape, &[]))
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, shape, &[])),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e = *e + *c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'s, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Borrows a parameter from the store. Repeated calls for the same id
    /// return the same node.
    pub fn param(&mut self, store: &'s ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Routes later [`Tape::param`] lookups for `id` to `var`.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    /// Copies the value into a fresh constant; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).item()
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Adds a vector of length `n` to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        Ok(self.push_op(out, Op::AddRow(x, row), &[x, row]))
    }

    /// Multiplies every row of a `[.., n]` tensor by a vector of length `n`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        Ok(self.push_op(out, Op::MulRow(x, row), &[x, row]))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let n = last_dim(op, self.shape(x))?;
        if self.shape(row) != [n] {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r[i % n]))
            .collect();
        Tensor::new(xv.shape(), data)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        self.push_op(out, Op::Scale(x, s), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v + s);
        self.push_op(out, Op::AddScalar(x), &[x])
    }

    /// `input * weight^T + bias` for input `[n_in]` or `[batch, n_in]` and
    /// weight `[n_out, n_in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (n_out, n_in) = matrix_dims("linear", self.shape(weight))?;
        let (batch, width) = match in_shape.as_slice() {
            [w] => (1, *w),
            [b, w] => (*b, *w),
            _ => return Err(Error::shape("linear", &in_shape, self.shape(weight))),
        };
        if width != n_in {
            return Err(Error::shape("linear", &in_shape, self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [n_out] {
                return Err(Error::shape("linear bias", self.shape(weight), self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); batch * n_out];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(n_out) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            batch,
            n_in,
            n_out,
            self.value(input).data(),
            Layout::Plain,
            self.value(weight).data(),
            Layout::Transposed,
            &mut out,
            bias.is_some(),
        );
        let shape: Vec<usize> = if in_shape.len() == 1 {
            vec![n_out]
        } else {
            vec![batch, n_out]
        };
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_op(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &inputs,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Plain,
            self.value(b).data(),
            Layout::Plain,
            &mut out,
            false,
        );
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.shape(a))?;
        let out = transpose_data(self.value(a).data(), 1, m, n);
        let out = Tensor::new(&[n, m], out)?;
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    /// `[b, m, n] -> [b, n, m]`.
    pub fn swap_last_axes(&mut self, a: Var) -> Result<Var> {
        let (b, m, n) = match self.shape(a) {
            [b, m, n] => (*b, *m, *n),
            s => return Err(Error::shape("swap_last_axes", s, &[])),
        };
        let out = transpose_data(self.value(a).data(), b, m, n);
        let out = Tensor::new(&[b, n, m], out)?;
        Ok(self.push_op(out, Op::SwapLastAxes(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    /// Columns `start..start + len` of a `[rows, cols]` tensor.
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims("narrow_cols", self.shape(a))?;
        if len == 0 || start + len > cols {
            return Err(Error::shape("narrow_cols", self.shape(a), &[start, len]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(&[rows, len], out)?;
        Ok(self.push_op(out, Op::NarrowCols { input: a, start }, &[a]))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let col = self.narrow_cols(a, j, 1)?;
        let rows = self.shape(col)[0];
        self.reshape(col, &[rows])
    }

    /// Concatenates `[rows, n_i]` tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        let (rows, _) = matrix_dims("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = matrix_dims("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(self.push_op(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(elu);
        self.push_op(out, Op::Elu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::ln);
        self.push_op(out, Op::Log(a), &[a])
    }

    /// Clamps to `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        self.push_op(out, Op::Clamp { input: a, lo, hi }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = T::of(t.len() as f64);
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean over consecutive groups of `group` entries along the last axis.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = last_dim("mean_groups", &shape)?;
        if group == 0 || n % group != 0 {
            return Err(Error::shape("mean_groups", &shape, &[group]));
        }
        let inv = T::of(1.0 / group as f64);
        let data: Vec<T> = self
            .value(a)
            .data()
            .chunks(group)
            .map(|c| c.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("checked") = n / group;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(out, Op::MeanGroups { input: a, group }, &[a]))
    }

    /// Repeats every entry `times` times along the last axis.
    pub fn repeat_elems(&mut self, a: Var, times: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = last_dim("repeat_elems", &shape)?;
        if times == 0 {
            return Err(Error::shape("repeat_elems", &shape, &[times]));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("checked") = n * times;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(out, Op::RepeatElems { input: a, times }, &[a]))
    }

    /// Solves `matrix * X = rhs` by LU with partial pivoting.
    ///
    /// Fails with [`Error::Singular`] when the 1-norm condition estimate
    /// exceeds `max_condition` (the reported H(A) is left at NaN; callers that
    /// know the adjacency fill it in).
    pub fn solve(&mut self, matrix: Var, rhs: Var, max_condition: f64) -> Result<Var> {
        let (n, n2) = matrix_dims("solve", self.shape(matrix))?;
        let (rows, cols) = matrix_dims("solve", self.shape(rhs))?;
        if n != n2 || rows != n {
            return Err(Error::shape("solve", self.shape(matrix), self.shape(rhs)));
        }
        let m = self.value(matrix).data();
        let singular = |condition| Error::Singular {
            condition,
            dagness: f64::NAN,
        };
        let lu = LuFactors::new(m, n).ok_or_else(|| singular(f64::INFINITY))?;
        let condition = lu.condition(m);
        if !(condition <= max_condition) {
            return Err(singular(condition));
        }
        let x = lu.solve(self.value(rhs).data(), cols);
        let out = Tensor::new(&[n, cols], x)?;
        Ok(self.push_op(out, Op::Solve { matrix, rhs, lu }, &[matrix, rhs]))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let (n, m) = matrix_dims("trace", self.shape(a))?;
        if n != m {
            return Err(Error::shape("trace", self.shape(a), &[]));
        }
        let v = self.value(a);
        let t = (0..n).fold(T::zero(), |acc, i| acc + v.at(i, i));
        Ok(self.push_op(Tensor::scalar(t), Op::Trace(a), &[a]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        Ok(Gradients {
            leaves: grads,
            params,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.wants(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.send(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                self.send(grads, *x, g.clone());
                if self.wants(*row) {
                    self.send(grads, *row, column_sums(g, self.value(*row).len()));
                }
            }
            Op::MulRow(x, row) => {
                let n = self.value(*row).len();
                if self.wants(*x) {
                    let r = self.value(*row).data();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| v * r[i % n])
                        .collect();
                    self.send(grads, *x, Tensor::new(g.shape(), data).expect("shape"));
                }
                if self.wants(*row) {
                    let prod = zip_map(g, self.value(*x), |a, b| a * b);
                    self.send(grads, *row, column_sums(&prod, n));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.send(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => self.send(grads, *x, g.clone()),
            Op::Linear {
                input,
                weight,
                bias,
            } => self.linear_backward(*input, *weight, *bias, g, grads),
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims("matmul", self.shape(*a)).expect("shape");
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        Layout::Plain,
                        self.value(*b).data(),
                        Layout::Transposed,
                        &mut ga,
                        false,
                    );
                    self.send(grads, *a, Tensor::new(&[m, k], ga).expect("shape"));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a).data(),
                        Layout::Transposed,
                        g.data(),
                        Layout::Plain,
                        &mut gb,
                        false,
                    );
                    self.send(grads, *b, Tensor::new(&[k, n], gb).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = matrix_dims("transpose", self.shape(*a)).expect("shape");
                // g is [n, m]
                let data = transpose_data(g.data(), 1, n, m);
                self.send(grads, *a, Tensor::new(&[m, n], data).expect("shape"));
            }
            Op::SwapLastAxes(a) => {
                let s = self.shape(*a);
                let (b, m, n) = (s[0], s[1], s[2]);
                let data = transpose_data(g.data(), b, n, m);
                self.send(grads, *a, Tensor::new(&[b, m, n], data).expect("shape"));
            }
            Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.shape(*a)).expect("shape");
                self.send(grads, *a, shaped);
            }
            Op::NarrowCols { input, start } => {
                let (rows, cols) = matrix_dims("narrow_cols", self.shape(*input)).expect("shape");
                let len = g.shape()[1];
                let mut full = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    full.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.send(grads, *input, full);
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.send(grads, p, Tensor::new(&[rows, w], part).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::Elu(a) => {
                let gx = zip_map(g, self.value(*a), |gv, x| gv * elu_derivative(x));
                self.send(grads, *a, gx);
            }
            Op::Exp(a) => {
                let gx = zip_map(g, &node.value, |gv, y| gv * y);
                self.send(grads, *a, gx);
            }
            Op::Log(a) => {
                let gx = zip_map(g, self.value(*a), |gv, x| gv / x);
                self.send(grads, *a, gx);
            }
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let gx = zip_map(g, self.value(*input), |gv, x| {
                    if x >= lo && x <= hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.send(grads, *input, gx);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.send(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).len() as f64);
                let gv = g.item() / n;
                self.send(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::MeanGroups { input, group } => {
                let inv = T::of(1.0 / *group as f64);
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, *group))
                    .collect();
                self.send(
                    grads,
                    *input,
                    Tensor::new(self.shape(*input), data).expect("shape"),
                );
            }
            Op::RepeatElems { input, times } => {
                let data: Vec<T> = g
                    .data()
                    .chunks(*times)
                    .map(|c| c.iter().fold(T::zero(), |acc, &v| acc + v))
                    .collect();
                self.send(
                    grads,
                    *input,
                    Tensor::new(self.shape(*input), data).expect("shape"),
                );
            }
            Op::Solve { matrix, rhs, lu } => {
                // X = M^-1 B:  dB = M^-T dX,  dM = -dB X^T.
                let n = lu.dim();
                let cols = g.shape()[1];
                let g_rhs = lu.solve_transposed(g.data(), cols);
                if self.wants(*matrix) {
                    let mut gm = vec![T::zero(); n * n];
                    gemm(
                        n,
                        cols,
                        n,
                        &g_rhs,
                        Layout::Plain,
                        node.value.data(),
                        Layout::Transposed,
                        &mut gm,
                        false,
                    );
                    for v in gm.iter_mut() {
                        *v = -*v;
                    }
                    self.send(grads, *matrix, Tensor::new(&[n, n], gm).expect("shape"));
                }
                self.send(grads, *rhs, Tensor::new(&[n, cols], g_rhs).expect("shape"));
            }
            Op::Trace(a) => {
                let n = self.shape(*a)[0];
                let mut ga = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    ga.set(i, i, g.item());
                }
                self.send(grads, *a, ga);
            }
        }
    }

    fn linear_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n_out, n_in) = matrix_dims("linear", self.shape(weight)).expect("shape");
        let batch = g.len() / n_out;
        if self.wants(input) {
            let mut gx = vec![T::zero(); batch * n_in];
            gemm(
                batch,
                n_out,
                n_in,
                g.data(),
                Layout::Plain,
                self.value(weight).data(),
                Layout::Plain,
                &mut gx,
                false,
            );
            self.send(
                grads,
                input,
                Tensor::new(self.shape(input), gx).expect("shape"),
            );
        }
        if self.wants(weight) {
            let slot = &mut grads[weight.0];
            let accumulate_into = slot.is_some();
            let target = slot.get_or_insert_with(|| Tensor::zeros(&[n_out, n_in]));
            gemm(
                n_out,
                batch,
                n_in,
                g.data(),
                Layout::Transposed,
                self.value(input).data(),
                Layout::Plain,
                target.data_mut(),
                accumulate_into,
            );
        }
        if let Some(b) = bias {
            if self.wants(b) {
                self.send(grads, b, column_sums(g, n_out));
            }
        }
    }
}

pub(crate) fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of ELU; 1 at the origin.
pub(crate) fn elu_derivative<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); n];
    for row in g.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::vector(out)
}

/// Transposes each of `batch` row-major `m x n` blocks.
fn transpose_data<T: Scalar>(src: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::diffcore::grad_check;

    fn ramp(shape: &[usize], offset: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i as f64 + offset) * 0.731).sin() * 0.9)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn weights(t: &mut Tape<'_, f64>, shape: &[usize]) -> Var {
        t.constant(ramp(shape, 11.0))
    }

    /// Reduces an arbitrary output to a scalar with non-uniform weights so
    /// every output entry contributes distinctly.
    fn contract(t: &mut Tape<'_, f64>, y: Var) -> Result<Var> {
        let w = weights(t, &t.shape(y).to_vec());
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    fn check(point: Tensor<f64>, f: impl for<'t> Fn(&mut Tape<'t, f64>, Var) -> Result<Var>) {
        let c = grad_check(f, &point).unwrap();
        assert!(c.max_rel_error < 1e-6, "rel err {}", c.max_rel_error);
    }

    #[test]
    fn elementwise_ops() {
        check(ramp(&[2, 3], 0.0), |t, x| {
            let k = weights(t, &[2, 3]);
            let a = t.add(x, k)?;
            let b = t.sub(a, x)?;
            let c = t.mul(b, x)?;
            let d = t.mul(c, x)?;
            let e = t.scale(d, -1.5);
            let f = t.add_scalar(e, 0.25);
            let g = t.exp(f);
            contract(t, g)
        });
        check(ramp(&[5], 2.0).map(|v| v.abs() + 0.5), |t, x| {
            let l = t.log(x);
            contract(t, l)
        });
        check(ramp(&[7], 0.3), |t, x| {
            let e = t.elu(x);
            contract(t, e)
        });
        check(ramp(&[7], 0.3).map(|v| v * 3.0), |t, x| {
            let c = t.clamp(x, -1.0, 1.0);
            contract(t, c)
        });
    }

    #[test]
    fn broadcast_ops() {
        let row = ramp(&[3], 5.0);
        check(ramp(&[4, 3], 0.0), |t, x| {
            let r = t.constant(row.clone());
            let a = t.add_row(x, r)?;
            let m = t.mul_row(a, r)?;
            contract(t, m)
        });
        let x0 = ramp(&[4, 3], 0.0);
        check(row.clone(), |t, r| {
            let x = t.constant(x0.clone());
            let a = t.add_row(x, r)?;
            let m = t.mul_row(a, r)?;
            contract(t, m)
        });
    }

    #[test]
    fn linear_all_arguments() {
        let w0 = ramp(&[3, 4], 1.0);
        let b0 = ramp(&[3], 2.0);
        let x0 = ramp(&[2, 4], 3.0);
        check(x0.clone(), |t, x| {
            let w = t.constant(w0.clone());
            let b = t.constant(b0.clone());
            let y = t.linear(x, w, Some(b))?;
            contract(t, y)
        });
        check(w0.clone(), |t, w| {
            let x = t.constant(x0.clone());
            let b = t.constant(b0.clone());
            let y = t.linear(x, w, Some(b))?;
            let y2 = t.linear(x, w, None)?;
            let s = t.add(y, y2)?;
            contract(t, s)
        });
        check(b0.clone(), |t, b| {
            let x = t.constant(x0.clone());
            let w = t.constant(w0.clone());
            let y = t.linear(x, w, Some(b))?;
            contract(t, y)
        });
    }

    #[test]
    fn matrix_ops() {
        let b0 = ramp(&[3, 2], 4.0);
        check(ramp(&[2, 3], 0.0), |t, a| {
            let b = t.constant(b0.clone());
            let p = t.matmul(a, b)?;
            let q = t.transpose(p)?;
            contract(t, q)
        });
        let a0 = ramp(&[2, 3], 0.0);
        check(b0.clone(), |t, b| {
            let a = t.constant(a0.clone());
            let p = t.matmul(a, b)?;
            contract(t, p)
        });
        check(ramp(&[3, 3], 1.0), |t, a| {
            let sq = t.matmul(a, a)?;
            t.trace(sq)
        });
    }

    #[test]
    fn solve_gradients_for_matrix_and_rhs() {
        let mut m0 = ramp(&[3, 3], 0.0).map(|v| v * 0.3);
        for i in 0..3 {
            m0.set(i, i, 2.0 + i as f64);
        }
        let b0 = ramp(&[3, 4], 6.0);
        check(m0.clone(), |t, m| {
            let b = t.constant(b0.clone());
            let x = t.solve(m, b, 1e8)?;
            contract(t, x)
        });
        check(b0, |t, b| {
            let m = t.constant(m0.clone());
            let x = t.solve(m, b, 1e8)?;
            contract(t, x)
        });
    }

    #[test]
    fn layout_ops() {
        check(ramp(&[2, 3, 4], 0.0), |t, x| {
            let s = t.swap_last_axes(x)?;
            let r = t.reshape(s, &[8, 3])?;
            let n = t.narrow_cols(r, 1, 2)?;
            let c = t.column(r, 0)?;
            let c2 = t.reshape(c, &[8, 1])?;
            let cat = t.concat_cols(&[n, c2, n])?;
            contract(t, cat)
        });
        check(ramp(&[3, 6], 0.0), |t, x| {
            let m = t.mean_groups(x, 3)?;
            let r = t.repeat_elems(m, 2)?;
            let s = t.mean(r);
            let k = contract(t, r)?;
            t.add(s, k)
        });
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(vec![3.0]));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let s = t.sum(z);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(vec![2.0]));
        let y = t.square(x).unwrap();
        let d = t.detach(y);
        let z = t.mul(d, x).unwrap();
        let s = t.sum(z);
        let g = t.backward(s).unwrap();
        // d/dx (stop(x^2) * x) = x^2
        assert_eq!(g.wrt(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn params_are_cached_and_reported() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut t = Tape::new();
        let a = t.param(&store, w);
        let b = t.param(&store, w);
        assert_eq!(a, b);
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p);
        let grads = t.backward(s).unwrap().into_param_grads(store.len());
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn singular_solve_is_reported() {
        let mut t = Tape::<f32>::new();
        let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        assert!(matches!(t.solve(m, b, 1e8), Err(Error::Singular { .. })));
    }

    proptest! {
        #[test]
        fn forward_and_backward_stay_finite(xs in proptest::collection::vec(-30.0f32..30.0, 12)) {
            let mut t = Tape::<f32>::new();
            let x = t.leaf(Tensor::new(&[3, 4], xs).unwrap());
            let e = t.elu(x);
            let c = t.clamp(e, -10.0, 10.0);
            let ex = t.exp(c);
            let m = t.mean_groups(ex, 2).unwrap();
            let s = t.mean(m);
            prop_assert!(t.value(s).is_finite());
            let g = t.backward(s).unwrap();
            prop_assert!(g.wrt(x).unwrap().is_finite());
        }
    }
}
